use dccrn_kws::audio_dsp::{read_wav, write_wav, AudioBuffer};
use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dccrn-kws"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn first_keyword_wav(manifest: &Path) -> String {
    let text = std::fs::read_to_string(manifest).unwrap();
    let line = text.lines().find(|l| l.contains("\"keyword\"")).unwrap();
    let v: serde_json::Value = serde_json::from_str(line).unwrap();
    let p = Path::new(v["path"].as_str().unwrap());
    if p.is_absolute() {
        p.display().to_string()
    } else {
        manifest.parent().unwrap().join(p).display().to_string()
    }
}

#[test]
fn exit_codes() {
    let o = run(&["no-such-command"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(run(&["--help"]).status.success());

    let o = run(&["eval-roc", "--checkpoint", "/nonexistent.bin", "--manifest", "/nonexistent.jsonl", "--out", "/tmp/x.tsv"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).lines().any(|l| l.starts_with("error\t")), "{}", stderr(&o));

    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("bad.conf");
    std::fs::write(&conf, "preset = toy\nno_such_key = 3\n").unwrap();
    let o = run(&["train", "--config", conf.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn toy_corpus_train_and_stream() {
    let dir = tempfile::tempdir().unwrap();
    let d = |s: &str| dir.path().join(s).display().to_string();

    let o = run(&["toy-corpus", "--out-dir", &d("toy")]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("train\t"));

    let o = run(&[
        "train",
        "--train-manifest",
        &d("toy/train.jsonl"),
        "--iterations",
        "2",
        "--out-dir",
        &d("run"),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).lines().any(|l| l.starts_with("iter\t1\t")));
    assert!(dir.path().join("run/latest.bin").exists());
    assert!(dir.path().join("run/resolved.conf").exists());

    // the same audio as raw 16-bit PCM on stdin and as a WAV file
    let wav = first_keyword_wav(&dir.path().join("toy/test.jsonl"));
    let audio = read_wav(&wav, None).unwrap();
    let q: Vec<i16> = audio
        .samples
        .iter()
        .map(|&s| (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16)
        .collect();
    let quantised = AudioBuffer::new(q.iter().map(|&v| v as f32 / 32768.0).collect(), audio.sample_rate).unwrap();
    write_wav(d("q.wav"), &quantised).unwrap();
    let common = ["stream", "--checkpoint", &d("run/latest.bin"), "--threshold", "0", "--chunk-ms", "30"];

    let from_file = run(&[&common[..], &["--wav", &d("q.wav")]].concat());
    assert!(from_file.status.success(), "{}", stderr(&from_file));

    let mut child = bin().args(common).stdin(Stdio::piped()).stdout(Stdio::piped()).spawn().unwrap();
    let bytes: Vec<u8> = q.iter().flat_map(|v| v.to_le_bytes()).collect();
    child.stdin.take().unwrap().write_all(&bytes).unwrap();
    let from_stdin = child.wait_with_output().unwrap();
    assert!(from_stdin.status.success());

    let text = stdout(&from_file);
    assert!(!text.is_empty());
    assert!(text.lines().all(|l| l.split('\t').count() == 3), "{text}");
    assert_eq!(text, stdout(&from_stdin));
}
