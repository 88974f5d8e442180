use std::path::Path;

use convdraw::analysis::eval_bound;
use convdraw::cli::run;
use convdraw::codec::{compress, CodecModel};
use convdraw::data::ImageBatch;
use convdraw::model::ConvDraw;
use convdraw::nn::Checkpoint;
use convdraw::train::synth;

const CONFIG: &str = "\
model.timesteps = 4
model.channels = 1
model.height = 12
model.width = 12
model.lstm_feature_maps = 6
model.latent_maps = 2
model.kernel = 3
model.likelihood = bernoulli
model.fixed_posterior_variance = true
train.steps = 12
train.batch_size = 8
data.train = 64
data.valid = 16
";

fn s(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

fn train_into(dir: &Path) -> std::path::PathBuf {
    let cfg = dir.join("toy.cfg");
    std::fs::write(&cfg, CONFIG).unwrap();
    let out = dir.join("run");
    assert_eq!(
        run([
            "convdraw",
            "train",
            "--config",
            &s(&cfg),
            "--seed",
            "3",
            "--out",
            &s(&out)
        ]),
        0
    );
    out.join("model.ckpt")
}

#[test]
fn compress_decompress_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_into(dir.path());
    let img = synth::glyphs(1, 12, 3, 9);
    let raw = dir.path().join("img.raw");
    std::fs::write(&raw, img.bytes()).unwrap();
    let stream = dir.path().join("img.cdrw");
    let dec = dir.path().join("dec.raw");
    let args = |extra: &[&str]| {
        let mut v = vec!["convdraw".to_string()];
        v.extend(extra.iter().map(|a| a.to_string()));
        v
    };
    assert_eq!(
        run(args(&[
            "compress",
            "--model",
            &s(&ckpt),
            "--t-keep",
            "3",
            "--lambda",
            "0.5",
            "--seed",
            "4",
            &s(&raw),
            &s(&stream)
        ])),
        0
    );
    assert_eq!(
        run(args(&[
            "decompress",
            "--model",
            &s(&ckpt),
            "--seed",
            "4",
            &s(&stream),
            &s(&dec)
        ])),
        0
    );

    let cm = CodecModel::<f32>::from_checkpoint(&Checkpoint::read(&ckpt).unwrap()).unwrap();
    let x: ImageBatch<f32> = img.all(1.0 / 256.0);
    let c = compress(&cm, &x, 3, 0.5, 4).unwrap();
    assert_eq!(std::fs::read(&stream).unwrap(), c.bitstream.to_bytes());
    assert_eq!(std::fs::read(&dec).unwrap(), c.reconstruction.to_u8());

    // same argv and seed give the same bytes
    let again = dir.path().join("again.cdrw");
    assert_eq!(
        run(args(&[
            "compress",
            "--model",
            &s(&ckpt),
            "--t-keep",
            "3",
            "--lambda",
            "0.5",
            "--seed",
            "4",
            &s(&raw),
            &s(&again)
        ])),
        0
    );
    assert_eq!(
        std::fs::read(&again).unwrap(),
        std::fs::read(&stream).unwrap()
    );

    // a different model refuses the stream
    let cfg = dir.path().join("toy.cfg");
    let other = dir.path().join("other");
    assert_eq!(
        run(args(&[
            "train",
            "--config",
            &s(&cfg),
            "--seed",
            "5",
            "--out",
            &s(&other)
        ])),
        0
    );
    let code = run(args(&[
        "decompress",
        "--model",
        &s(&other.join("model.ckpt")),
        &s(&stream),
        &s(&dec),
    ]));
    assert_eq!(code, 2);
}

#[test]
fn eval_matches_library_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_into(dir.path());
    let model = ConvDraw::<f32>::from_checkpoint(&Checkpoint::read(&ckpt).unwrap()).unwrap();
    let (_, valid) = convdraw::cli::DataConfig {
        train: 64,
        valid: 16,
        ..Default::default()
    }
    .load(1, 12, 12)
    .unwrap();
    let want = eval_bound(&model, &valid, 1, 6).unwrap();
    let got = convdraw::analysis::evaluate(&model, &valid, 1, 32, 6)
        .unwrap()
        .0;
    assert_eq!(want.nats, got.nats);
    let cfg = s(&dir.path().join("toy.cfg"));
    assert_eq!(
        run([
            "convdraw",
            "eval",
            "--model",
            &s(&ckpt),
            "--config",
            &cfg,
            "--seed",
            "6"
        ]),
        0
    );
    assert_eq!(
        run([
            "convdraw",
            "eval",
            "--model",
            &s(&ckpt),
            "--set",
            "model.kernel=5"
        ]),
        1
    );
    assert_eq!(run(["convdraw", "bench", "--set", "train.nope=1"]), 1);
    assert_eq!(run(["convdraw"]), 1);
    assert_eq!(run(["convdraw", "--help"]), 0);
}
