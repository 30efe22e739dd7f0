use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
n_speakers = 4
utts_per_speaker = 6
utt_duration_s = 0.6
segment_s = 0.5
n_eval_speakers = 3
eval_utts_per_speaker = 3
noise_clips_per_kind = 2
noise_clip_s = 2.0
n_mels = 24
mask_hidden = 16
mask_bottleneck = 8
mask_epochs = 1
mask_train_pairs = 8
unet_channels = [4, 8]
encoder_channels = 16
embedding_dim = 16
pretrain_epochs = 1
pretrain_batch_size = 8
epochs = 2
batch_size = 8
"#;

fn ufema(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ufema"))
        .args(args)
        .current_dir(root)
        .env("UFEMA_RUNS_DIR", root.join("runs"))
        .env("UFEMA_DATA_DIR", root.join("data"))
        .output()
        .expect("spawn ufema")
}

fn ok(root: &Path, args: &[&str]) -> String {
    let out = ufema(root, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn error_line(out: &Output) -> String {
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    stderr
        .lines()
        .find(|l| l.starts_with("ufema-error "))
        .unwrap_or_else(|| panic!("no error line in {stderr}"))
        .to_string()
}

#[test]
fn full_pipeline_writes_reproducible_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::write(root.join("tiny.toml"), TINY).unwrap();

    ok(root, &["synth-corpus", "--config", "tiny.toml"]);
    let trials = root.join("data/tiny/trials.txt");
    assert!(trials.exists());
    assert!(root.join("data/tiny/train.tsv").exists());

    ok(root, &["train-enhancer", "--config", "tiny.toml"]);
    ok(root, &["pretrain-encoder", "--config", "tiny.toml"]);
    ok(root, &["train", "--config", "tiny.toml"]);
    let ckpt = root.join("runs/tiny/joint/joint.ckpt");
    let first = std::fs::read(&ckpt).unwrap();

    let log = std::fs::read_to_string(root.join("runs/tiny/joint/train.log")).unwrap();
    assert_eq!(log.lines().count(), 6);
    assert!(log
        .lines()
        .all(|l| l.starts_with("step=") && l.contains(" loss=") && l.contains(" lr=")));

    let csv = ok(
        root,
        &[
            "evaluate",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--trials",
            trials.to_str().unwrap(),
            "--conditions",
            "clean,babble@-5",
        ],
    );
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("condition,snr_db,eer,n_target,n_nontarget")
    );
    assert!(lines.next().unwrap().starts_with("clean,,"));
    assert!(lines.next().unwrap().starts_with("babble,-5,"));

    let sweep = ok(
        root,
        &[
            "sweep-interp",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--weights",
            "0,1",
        ],
    );
    assert!(sweep.starts_with("method,w,condition,snr_db,eer"));
    for kind in ["noise", "music", "babble"] {
        assert!(root
            .join(format!("runs/tiny/joint/sweep_{kind}.svg"))
            .exists());
    }

    ok(root, &["train", "--config", "tiny.toml"]);
    assert_eq!(
        std::fs::read(&ckpt).unwrap(),
        first,
        "retraining changed the checkpoint"
    );
    let again = ok(
        root,
        &[
            "evaluate",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--trials",
            trials.to_str().unwrap(),
            "--conditions",
            "clean,babble@-5",
        ],
    );
    assert_eq!(again, csv);

    let manifest = std::fs::read_to_string(root.join("runs/tiny/manifest.json")).unwrap();
    for artifact in [
        "enhancers/mask_net.ckpt",
        "encoder.ckpt",
        "joint/joint.ckpt",
        "joint/sweep.csv",
    ] {
        assert!(manifest.contains(artifact), "manifest lacks {artifact}");
    }
    assert!(!root.join("runs/tiny/.lock").exists());
}

#[test]
fn errors_are_machine_parsable() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::write(root.join("bad.toml"), "bogus_key = 1\n").unwrap();
    let line = error_line(&ufema(root, &["train", "--config", "bad.toml"]));
    assert!(line.starts_with("ufema-error kind=unknown_key "), "{line}");

    std::fs::write(root.join("tiny.toml"), TINY).unwrap();
    let line = error_line(&ufema(root, &["train", "--config", "tiny.toml"]));
    assert!(line.starts_with("ufema-error kind=missing_file "), "{line}");

    std::fs::write(root.join("runs/tiny/.lock"), "").unwrap();
    let line = error_line(&ufema(root, &["pretrain-encoder", "--config", "tiny.toml"]));
    assert!(line.starts_with("ufema-error kind=locked "), "{line}");

    std::fs::remove_file(root.join("runs/tiny/.lock")).unwrap();
    let line = error_line(&ufema(
        root,
        &["train", "--config", "tiny.toml", "--ablate", "sideways"],
    ));
    assert!(
        line.starts_with("ufema-error kind=invalid_argument "),
        "{line}"
    );
}
