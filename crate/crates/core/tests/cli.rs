use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::Command;

use flate2::write::GzEncoder;
use flate2::Compression;
use hessreg::data::{IdxArray, IDX_IMAGES_U8, IDX_LABELS_U8};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hessreg"))
}

fn run(dir: &Path, args: &[&str]) -> i32 {
    let out = bin().current_dir(dir).args(args).output().expect("binary runs");
    if !out.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    }
    out.status.code().expect("exit code")
}

fn read(path: PathBuf) -> Vec<u8> {
    std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Convert, train, attack, certify and histogram into `root/<tag>`.
fn pipeline(root: &Path, tag: &str, jobs: &str) {
    let d = format!("{tag}/data");
    let m = format!("{tag}/data/manifest.json");
    let model = format!("{tag}/train/model.hnet");
    let [train, attack, certify, hist] = ["train", "attack", "certify", "hist"].map(|s| format!("{tag}/{s}"));
    let steps = [
        vec![
            "data-convert",
            "--synthetic",
            "blobs",
            "--n",
            "240",
            "--classes",
            "3",
            "--dim",
            "4",
            "--test-fraction",
            "0.25",
            "--out",
            &d,
        ],
        vec![
            "--jobs",
            jobs,
            "train",
            "--data",
            &m,
            "--mode",
            "cross-holder",
            "--lambda1",
            "0.01",
            "--epochs",
            "2",
            "--hidden",
            "6",
            "--lr",
            "0.05",
            "--out",
            &train,
        ],
        vec![
            "--jobs",
            jobs,
            "attack",
            "--data",
            &m,
            "--split",
            "test",
            "--model",
            &model,
            "--eps",
            "0.5,1",
            "--iterations",
            "5",
            "--restarts",
            "2",
            "--out",
            &attack,
        ],
        vec![
            "--jobs",
            jobs,
            "certify",
            "--data",
            &m,
            "--split",
            "test",
            "--model",
            &model,
            "--order",
            "both",
            "--cert-mode",
            "both",
            "--samples",
            "16",
            "--steps",
            "10",
            "--out",
            &certify,
        ],
        vec![
            "--jobs",
            jobs,
            "opnorm-hist",
            "--data",
            &m,
            "--split",
            "test",
            "--model",
            &model,
            "--steps",
            "10",
            "--starts",
            "2",
            "--out",
            &hist,
        ],
    ];
    for args in steps {
        assert_eq!(run(root, &args), 0, "{args:?}");
    }
}

#[test]
fn pipeline_outputs_are_byte_identical_across_reruns_and_thread_counts() {
    let root = tempfile::tempdir().unwrap();
    pipeline(root.path(), "a", "1");
    pipeline(root.path(), "b", "3");
    for file in [
        "data/train-images.idx",
        "data/manifest.json",
        "train/model.hnet",
        "train/metrics.jsonl",
        "attack/attack.csv",
        "certify/certificates.jsonl",
        "hist/opnorm.csv",
    ] {
        let a = read(root.path().join("a").join(file));
        assert!(!a.is_empty(), "{file}");
        assert_eq!(a, read(root.path().join("b").join(file)), "{file}");
    }
    let run_json: serde_json::Value = serde_json::from_slice(&read(root.path().join("a/train/run.json"))).unwrap();
    assert_eq!(run_json["config"]["mode"], "cross-holder");
    assert!(run_json["timing"]["wall_time_s"].as_f64().unwrap() >= 0.0);
    let metrics = String::from_utf8(read(root.path().join("a/train/metrics.jsonl"))).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    assert!(!metrics.contains("wall"));
}

#[test]
fn resume_from_checkpoint_matches_uninterrupted_run() {
    let root = tempfile::tempdir().unwrap();
    let p = root.path();
    assert_eq!(
        run(
            p,
            &["data-convert", "--synthetic", "quadratic", "--n", "200", "--out", "d"]
        ),
        0
    );
    let train = |out: &str, epochs: &str, resume: bool| {
        let mut args = vec![
            "train",
            "--data",
            "d/manifest.json",
            "--mode",
            "cross-lipschitz",
            "--lambda1",
            "0.05",
            "--hidden",
            "5",
            "--batch-size",
            "20",
            "--lr",
            "0.1",
            "--checkpoint-every",
            "1",
            "--epochs",
            epochs,
            "--out",
            out,
        ];
        if resume {
            args.push("--resume");
        }
        assert_eq!(run(p, &args), 0);
    };
    train("full", "3", false);
    train("split", "1", false);
    train("split", "3", true);
    assert_eq!(read(p.join("full/model.hnet")), read(p.join("split/model.hnet")));
    assert_eq!(read(p.join("full/metrics.jsonl")), read(p.join("split/metrics.jsonl")));
}

#[test]
fn exit_codes_follow_error_class() {
    let root = tempfile::tempdir().unwrap();
    let p = root.path();
    assert_eq!(run(p, &["train", "--no-such-flag"]), 2);
    assert_eq!(run(p, &["train", "--mode", "plain", "--lambda1", "0.1"]), 2);
    assert_eq!(run(p, &["train", "--data", "missing.json"]), 3);
    assert_eq!(
        run(p, &["data-convert", "--synthetic", "blobs", "--n", "60", "--out", "d"]),
        0
    );
    // a tampered file no longer matches its recorded checksum
    let labels = p.join("d/train-labels.idx");
    let mut bytes = read(labels.clone());
    *bytes.last_mut().unwrap() ^= 1;
    std::fs::write(&labels, bytes).unwrap();
    assert_eq!(
        run(
            p,
            &["train", "--data", "d/manifest.json", "--epochs", "1", "--out", "t"]
        ),
        3
    );
    assert_eq!(
        run(p, &["data-convert", "--synthetic", "blobs", "--n", "60", "--out", "e"]),
        0
    );
    assert_eq!(
        run(
            p,
            &[
                "train",
                "--data",
                "e/manifest.json",
                "--epochs",
                "3",
                "--lr",
                "1e200",
                "--hidden",
                "4",
                "--out",
                "t"
            ]
        ),
        4
    );
    assert_eq!(
        run(
            p,
            &[
                "attack",
                "--data",
                "e/manifest.json",
                "--model",
                "missing.hnet",
                "--out",
                "a"
            ]
        ),
        3
    );
}

fn gz(bytes: &[u8]) -> Vec<u8> {
    let mut enc = GzEncoder::new(Vec::new(), Compression::fast());
    enc.write_all(bytes).unwrap();
    enc.finish().unwrap()
}

fn idx_files(n: usize) -> (Vec<u8>, Vec<u8>) {
    let images = IdxArray {
        magic: IDX_IMAGES_U8,
        dims: vec![n, 4, 4],
        payload: (0..n * 16).map(|i| (i * 37 % 256) as u8).collect(),
    };
    let labels = IdxArray {
        magic: IDX_LABELS_U8,
        dims: vec![n],
        payload: (0..n).map(|i| (i % 10) as u8).collect(),
    };
    (gz(&images.to_bytes()), gz(&labels.to_bytes()))
}

#[test]
fn data_fetch_downloads_verifies_and_writes_manifest() {
    let (train_x, train_y) = idx_files(30);
    let (test_x, test_y) = idx_files(10);
    let files: Vec<(&str, Vec<u8>)> = vec![
        ("train-images-idx3-ubyte.gz", train_x),
        ("train-labels-idx1-ubyte.gz", train_y),
        ("t10k-images-idx3-ubyte.gz", test_x),
        ("t10k-labels-idx1-ubyte.gz", test_y),
    ];
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let server = std::thread::spawn(move || {
        for _ in 0..files.len() {
            let (mut stream, _) = listener.accept().unwrap();
            let mut request = String::new();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            reader.read_line(&mut request).unwrap();
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line.trim().is_empty() {
                    break;
                }
            }
            let path = request
                .split_whitespace()
                .nth(1)
                .unwrap()
                .trim_start_matches('/')
                .to_string();
            let body = &files.iter().find(|(name, _)| *name == path).expect("known file").1;
            write!(
                stream,
                "HTTP/1.1 200 OK\r\nContent-Length: {}\r\nContent-Type: application/octet-stream\r\nConnection: close\r\n\r\n",
                body.len()
            )
            .unwrap();
            stream.write_all(body).unwrap();
        }
    });
    let root = tempfile::tempdir().unwrap();
    let url = format!("http://{addr}/");
    assert_eq!(
        run(
            root.path(),
            &["data-fetch", "--dataset", "mnist", "--base-url", &url, "--out", "m"]
        ),
        0
    );
    server.join().unwrap();
    let manifest: serde_json::Value = serde_json::from_slice(&read(root.path().join("m/manifest.json"))).unwrap();
    assert_eq!(manifest["checksums"].as_object().unwrap().len(), 4);
    assert_eq!(manifest["num_classes"], 10);
    let (m, dir) = hessreg::data::Manifest::read(&root.path().join("m/manifest.json")).unwrap();
    let train = m.load(&dir, false).unwrap();
    assert_eq!((train.len(), train.sample_shape()), (30, &[1, 4, 4][..]));
    assert_eq!(m.load(&dir, true).unwrap().len(), 10);
}

#[test]
fn data_convert_reads_csv_images() {
    let root = tempfile::tempdir().unwrap();
    let mut csv = String::new();
    for i in 0..20 {
        let pixels: Vec<String> = (0..16).map(|p| ((i * 13 + p * 7) % 256).to_string()).collect();
        csv += &format!("{},{}\n", pixels.join(","), i % 2);
    }
    std::fs::write(root.path().join("digits.csv"), csv).unwrap();
    let args = [
        "data-convert",
        "--input",
        "digits.csv",
        "--image-side",
        "4",
        "--test-fraction",
        "0.25",
        "--out",
        "c",
    ];
    assert_eq!(run(root.path(), &args), 0);
    let (m, dir) = hessreg::data::Manifest::read(&root.path().join("c/manifest.json")).unwrap();
    let train = m.load(&dir, false).unwrap();
    let test = m.load(&dir, true).unwrap();
    assert_eq!(train.len() + test.len(), 20);
    assert_eq!(train.sample_shape(), &[1, 4, 4]);
    assert_eq!(train.clamp(), Some((0.0, 1.0)));
}
