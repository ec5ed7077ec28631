use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dereverb_core::audio_io::{load_manifest, read_wav, write_wav, BitDepth};
use dereverb_core::spectral::Waveform;
use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dereverb"))
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin()
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_config(dir: &Path, mics: usize) -> PathBuf {
    let cfg = serde_json::json!({
        "utterance_secs": 0.6,
        "sampler": { "mic_count": mics, "t60_range": [0.3, 0.5], "snr_range": [15.0, 20.0] },
        "optim": { "max_outer_iters": 2, "mask_steps_per_outer": 2 },
        "loss": { "k": 10, "past": 10 }
    });
    let path = dir.join(format!("cfg{mics}.json"));
    fs::write(&path, cfg.to_string()).unwrap();
    path
}

fn simulate(dir: &Path, name: &str, mics: usize, count: usize, seed: u64) -> PathBuf {
    let cfg = write_config(dir, mics);
    let out = run(
        &[
            "simulate",
            "--config",
            cfg.to_str().unwrap(),
            "--out-dir",
            name,
            "--count",
            &count.to_string(),
            "--seed",
            &seed.to_string(),
        ],
        dir,
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    dir.join(name).join("manifest.json")
}

fn all_files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn simulate_single_utterance_has_every_channel() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = simulate(tmp.path(), "c", 4, 1, 5);
    let m = load_manifest(&manifest).unwrap();
    assert_eq!(m.entries.len(), 1);
    let e = &m.entries[0];
    assert_eq!(e.mixture_paths.len(), 4);
    assert_eq!(e.direct_paths.len(), 4);
    assert_eq!(e.rir_full_paths.len(), 4);
    assert_eq!(e.scene.as_ref().unwrap().mic_count(), 4);
    let mix = read_wav(tmp.path().join("c").join(&e.mixture_paths[2])).unwrap();
    assert_eq!(mix.len(), 1);
    assert_eq!(mix[0].len(), 9600);
    assert!(e.extra.contains_key("t60"));
    let echo = read_json(&tmp.path().join("c/simulate_config.json"));
    assert_eq!(echo["config"]["sampler"]["seed"], 5);
    assert_eq!(echo["config"]["stft"]["window_len"], 512);
}

#[test]
fn simulate_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    simulate(tmp.path(), "a", 2, 2, 11);
    simulate(tmp.path(), "b", 2, 2, 11);
    simulate(tmp.path(), "c", 2, 2, 12);
    let a = all_files(&tmp.path().join("a"));
    assert_eq!(a, all_files(&tmp.path().join("b")));
    assert_ne!(a, all_files(&tmp.path().join("c")));
}

#[test]
fn simulate_validation_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["simulate", "--out-dir", "x", "--t60", "3.0"], tmp.path());
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("t60"));
    let out = run(&["simulate", "--out-dir", "x", "--t60", "0.01"], tmp.path());
    assert_eq!(code(&out), 2);

    fs::create_dir(tmp.path().join("empty")).unwrap();
    let out = run(
        &["simulate", "--out-dir", "x", "--dry-dir", "empty"],
        tmp.path(),
    );
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("no WAV"));
}

#[test]
fn simulate_uses_supplied_dry_speech() {
    let tmp = tempfile::tempdir().unwrap();
    let dry_dir = tmp.path().join("dry");
    let tone: Vec<f64> = (0..8000)
        .map(|i| 0.3 * (i as f64 * 0.05).sin() * (i as f64 * 0.001).cos())
        .collect();
    write_wav(
        dry_dir.join("one.wav"),
        &[Waveform::new(tone, 16000).unwrap()],
        BitDepth::Pcm16,
    )
    .unwrap();
    let cfg = write_config(tmp.path(), 2);
    let out = run(
        &[
            "simulate",
            "--config",
            cfg.to_str().unwrap(),
            "--dry-dir",
            "dry",
            "--out-dir",
            "c",
            "--count",
            "2",
        ],
        tmp.path(),
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let m = load_manifest(tmp.path().join("c/manifest.json")).unwrap();
    for e in &m.entries {
        assert!(e.extra["dry_source"].as_str().unwrap().ends_with("one.wav"));
        let mix = read_wav(tmp.path().join("c").join(&e.mixture_paths[0])).unwrap();
        assert_eq!(mix[0].len(), 8000);
    }
}

#[test]
fn wpe_eight_channels_uses_five_taps() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = simulate(tmp.path(), "c", 8, 1, 2);
    let out = run(
        &[
            "dereverb",
            "--manifest",
            manifest.to_str().unwrap(),
            "--system",
            "wpe",
            "--out-dir",
            "w",
            "--mics",
            "8",
        ],
        tmp.path(),
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let side = read_json(&tmp.path().join("w/utt0000.json"));
    assert_eq!(side["config"]["wpe"]["taps"], 5);
    assert_eq!(
        side["config"]["mic_subset"],
        serde_json::json!([0, 1, 2, 3, 4, 5, 6, 7])
    );
    assert!(
        side["filter_diagnostics"]["max_condition"]
            .as_f64()
            .unwrap()
            >= 1.0
    );
    let wav = read_wav(tmp.path().join("w/utt0000.wav")).unwrap();
    assert_eq!(wav.len(), 1);
    assert_eq!(wav[0].len(), 9600);

    let out = run(
        &[
            "dereverb",
            "--manifest",
            manifest.to_str().unwrap(),
            "--system",
            "wpe",
            "--out-dir",
            "w2",
            "--mics",
            "2",
        ],
        tmp.path(),
    );
    assert_eq!(code(&out), 0);
    let side = read_json(&tmp.path().join("w2/utt0000.json"));
    assert_eq!(side["config"]["mic_subset"], serde_json::json!([0, 3]));
    assert_eq!(side["config"]["wpe"]["taps"], 10);
}

#[test]
fn usd_single_channel_runs_with_full_variant_and_refuses_subtracted() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = simulate(tmp.path(), "c", 2, 1, 4);
    let m = manifest.to_str().unwrap();
    let cfg = write_config(tmp.path(), 2);
    let out = run(
        &[
            "dereverb",
            "--manifest",
            m,
            "--system",
            "usd",
            "--config",
            cfg.to_str().unwrap(),
            "--out-dir",
            "u",
            "--mics",
            "1",
        ],
        tmp.path(),
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let side = read_json(&tmp.path().join("u/utt0000.json"));
    assert_eq!(side["config"]["optim"]["loss"]["ref_variant"], "full");
    let traj = side["trajectory"].as_array().unwrap();
    assert!(!traj.is_empty());
    assert!(side["final_loss"].as_f64().unwrap() <= side["initial_loss"].as_f64().unwrap());

    let cfg = tmp.path().join("sub.json");
    fs::write(&cfg, r#"{"loss": {"ref_variant": "subtracted"}}"#).unwrap();
    let out = run(
        &[
            "dereverb",
            "--manifest",
            m,
            "--system",
            "usd",
            "--config",
            cfg.to_str().unwrap(),
            "--out-dir",
            "v",
            "--mics",
            "1",
        ],
        tmp.path(),
    );
    assert_eq!(code(&out), 2);
    let msg = stderr(&out);
    assert!(msg.contains("single microphone"), "{msg}");
    assert!(msg.contains("Y_q - S_q"), "{msg}");
    assert!(!tmp.path().join("v/utt0000.wav").exists());
}

#[test]
fn dereverb_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = simulate(tmp.path(), "c", 2, 1, 1);
    let m = manifest.to_str().unwrap();
    let out = run(
        &[
            "dereverb",
            "--manifest",
            m,
            "--system",
            "nmf",
            "--out-dir",
            "x",
        ],
        tmp.path(),
    );
    assert_eq!(code(&out), 2);
    let out = run(
        &[
            "dereverb",
            "--manifest",
            m,
            "--system",
            "wpe",
            "--out-dir",
            "x",
            "--mics",
            "3",
        ],
        tmp.path(),
    );
    assert_eq!(code(&out), 2);
    let out = run(
        &[
            "--jobs",
            "0",
            "dereverb",
            "--manifest",
            m,
            "--system",
            "wpe",
            "--out-dir",
            "x",
        ],
        tmp.path(),
    );
    assert_eq!(code(&out), 2);
    let out = run(
        &[
            "dereverb",
            "--manifest",
            "nope.json",
            "--system",
            "wpe",
            "--out-dir",
            "x",
        ],
        tmp.path(),
    );
    assert_eq!(code(&out), 3);

    fs::remove_file(tmp.path().join("c/utt0000/direct_ch1.wav")).unwrap();
    let out = run(
        &[
            "dereverb",
            "--manifest",
            m,
            "--system",
            "wpe",
            "--out-dir",
            "x",
        ],
        tmp.path(),
    );
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("utt0000"));
}

#[test]
fn dereverb_is_deterministic_across_worker_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = simulate(tmp.path(), "c", 2, 2, 8);
    let cfg = write_config(tmp.path(), 2);
    let m = manifest.to_str().unwrap();
    let c = cfg.to_str().unwrap();
    for (dir, jobs) in [("a", "1"), ("b", "2")] {
        let out = run(
            &[
                "--jobs",
                jobs,
                "dereverb",
                "--manifest",
                m,
                "--system",
                "usd",
                "--config",
                c,
                "--out-dir",
                dir,
                "--seed",
                "3",
            ],
            tmp.path(),
        );
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let a = all_files(&tmp.path().join("a"));
    assert_eq!(a.len(), 5);
    assert_eq!(a, all_files(&tmp.path().join("b")));
}

#[test]
fn eval_rows_baseline_and_missing_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = simulate(tmp.path(), "c", 2, 2, 6);
    let m = manifest.to_str().unwrap();
    for dir in ["w", "w1"] {
        let mics = if dir == "w" { "2" } else { "1" };
        let out = run(
            &[
                "dereverb",
                "--manifest",
                m,
                "--system",
                "wpe",
                "--out-dir",
                dir,
                "--mics",
                mics,
            ],
            tmp.path(),
        );
        assert_eq!(code(&out), 0);
    }
    let out = run(
        &[
            "eval",
            "--manifest",
            m,
            "--enhanced-dir",
            "wpe2=w",
            "--enhanced-dir",
            "w1",
            "--out",
            "r.csv",
        ],
        tmp.path(),
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = fs::read_to_string(tmp.path().join("r.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "utt_id,system,si_sdr_db");
    assert_eq!(lines.len(), 1 + 2 * 3);
    for line in &lines[1..] {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols.len(), 3);
        cols[2].parse::<f64>().unwrap();
    }
    assert!(lines.iter().any(|l| l.starts_with("utt0001,mixture,")));
    let summary = read_json(&tmp.path().join("r.json"));
    let means = summary["report"]["mean_si_sdr_db"].as_object().unwrap();
    assert_eq!(
        means.keys().cloned().collect::<Vec<_>>(),
        ["mixture", "w1", "wpe2"]
    );

    // mixture-only evaluation: the baseline row shape
    fs::create_dir(tmp.path().join("none")).unwrap();
    fs::copy(
        tmp.path().join("w/utt0000.wav"),
        tmp.path().join("none/utt0000.wav"),
    )
    .unwrap();
    let out = run(
        &[
            "eval",
            "--manifest",
            m,
            "--enhanced-dir",
            "none",
            "--out",
            "r2.csv",
        ],
        tmp.path(),
    );
    assert_ne!(code(&out), 0);
    assert!(stderr(&out).contains("none/utt0001"));
    let csv = fs::read_to_string(tmp.path().join("r2.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 + 1);
}

#[test]
fn losscurve_outputs_and_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = simulate(tmp.path(), "c", 2, 1, 9);
    let m = manifest.to_str().unwrap();
    let entry = load_manifest(&manifest).unwrap().entries.remove(0);
    let rir_len = read_wav(tmp.path().join("c").join(&entry.rir_full_paths[0])).unwrap()[0].len();

    let step = rir_len.to_string();
    let out = run(
        &[
            "losscurve",
            "--manifest",
            m,
            "--utt-id",
            "utt0000",
            "--tau-step",
            &step,
            "--out",
            "full.csv",
        ],
        tmp.path(),
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = fs::read_to_string(tmp.path().join("full.csv")).unwrap();
    let rows = csv.lines().count() - 1;
    assert!((1..=2).contains(&rows), "{rows} rows");

    let out = run(
        &[
            "losscurve",
            "--manifest",
            m,
            "--utt-id",
            "utt0000",
            "--max-tau",
            "121",
            "--out",
            "c.csv",
            "--sparkline",
        ],
        tmp.path(),
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = fs::read_to_string(tmp.path().join("c.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("tau_samples,loss_total,loss_ref"));
    let taus: Vec<usize> = lines
        .map(|l| {
            let cols: Vec<&str> = l.split(',').collect();
            assert!(cols[1].parse::<f64>().unwrap() > 0.0);
            cols[0].parse().unwrap()
        })
        .collect();
    assert_eq!(taus, (0..13).map(|i| 1 + 10 * i).collect::<Vec<_>>());
    assert_eq!(
        String::from_utf8(out.stdout)
            .unwrap()
            .trim()
            .chars()
            .count(),
        13
    );
    assert_eq!(read_json(&tmp.path().join("c.json"))["tau_step"], 10);

    let out = run(
        &[
            "losscurve",
            "--manifest",
            m,
            "--utt-id",
            "missing",
            "--out",
            "x.csv",
        ],
        tmp.path(),
    );
    assert_eq!(code(&out), 2);
}
