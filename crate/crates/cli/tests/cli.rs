//! End-to-end runs of the `c2datt` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use c2datt::attention::{AttentionConfig, Pooling, Variant};
use c2datt::frontend::{write_wav, Fbank, FeatureConfig};
use c2datt::model::{load_checkpoint, Model, ModelConfig};
use c2datt::pipeline::{embed_utterance, metrics};
use c2datt::rng;
use c2datt::scoring::{label_scores, read_trials, score_trials, EmbeddingStore};
use c2datt::synth::{synth_utterance, SpeakerProfile};
use c2datt::train::{lr_at, TrainConfig};
use tempfile::TempDir;

/// `eval` prints EER as a percentage with four decimals.
const EER_PRINT_TOL: f64 = 1e-4;

fn c2datt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_c2datt"))
        .args(args)
        .env("C2DATT_THREADS", "1")
        .output()
        .expect("spawn c2datt")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn voice_wav(path: &Path, seconds: f64, sample_rate: u32, seed: u64) {
    let mut r = rng::seeded(seed);
    let profile = SpeakerProfile::random(&mut r);
    write_wav(path, &synth_utterance(&profile, seconds, sample_rate, &mut r)).unwrap();
}

const MODEL_TOML: &str = "depth = 34\nwidth = 4\nin_mels = 16\nembed_dim = 8\nasp_bottleneck = 8\n\n[attention]\nvariant = \"c2d\"\npooling = \"std\"\n";

const TRAIN_TOML: &str = "epochs = 2\nbatch_size = 4\ncrop_seconds = 1.0\nwarmup_steps = 2\ndecay_epochs = [2]\nlr_peak = 0.001\n\n[features]\nn_mels = 16\n";

/// A tiny synthetic corpus and a model trained on it for two epochs.
struct Trained {
    dir: TempDir,
    train_stdout: String,
}

impl Trained {
    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }
    fn ckpt(&self) -> PathBuf {
        self.path("run/final.ckpt")
    }
}

fn write_configs(dir: &Path) {
    std::fs::write(dir.join("model.toml"), MODEL_TOML).unwrap();
    std::fs::write(dir.join("train.toml"), TRAIN_TOML).unwrap();
}

fn train_into(dir: &Path, run: &str, seed: &str) -> Output {
    let (m, t, o) = (dir.join("corpus/train.tsv"), dir.join("model.toml"), dir.join(run));
    let tc = dir.join("train.toml");
    c2datt(&[
        "train",
        "--manifest",
        s(&m),
        "--model-config",
        s(&t),
        "--train-config",
        s(&tc),
        "--out-dir",
        s(&o),
        "--seed",
        seed,
    ])
}

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let corpus = dir.path().join("corpus");
        ok(&c2datt(&[
            "synth",
            "--out-dir",
            s(&corpus),
            "--speakers",
            "3",
            "--utts",
            "4",
            "--held-out",
            "2",
            "--min-seconds",
            "1.5",
            "--max-seconds",
            "2",
            "--target-trials",
            "3",
            "--nontarget-trials",
            "3",
        ]));
        write_configs(dir.path());
        let train_stdout = ok(&train_into(dir.path(), "run", "7"));
        Trained { dir, train_stdout }
    })
}

#[test]
fn feats_prints_mels_by_frames() {
    let dir = TempDir::new().unwrap();
    let wav = dir.path().join("a.wav");
    voice_wav(&wav, 2.0, 16_000, 1);
    let out = dir.path().join("a.feats");
    let stdout = ok(&c2datt(&["feats", "--wav", s(&wav), "--out", s(&out)]));
    // 25 ms window, 10 ms hop: 1 + (32000 - 400) / 160 frames.
    assert_eq!(stdout.trim(), "64 x 198");
    assert!(out.is_file());
}

#[test]
fn missing_input_is_a_validation_error_naming_the_path() {
    let dir = TempDir::new().unwrap();
    let wav = dir.path().join("nowhere.wav");
    let out = c2datt(&["feats", "--wav", s(&wav), "--out", s(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("nowhere.wav"), "{}", stderr(&out));
}

#[test]
fn wrong_sample_rate_is_rejected() {
    let dir = TempDir::new().unwrap();
    let wav = dir.path().join("narrow.wav");
    voice_wav(&wav, 1.0, 8_000, 2);
    let out = c2datt(&["feats", "--wav", s(&wav), "--out", s(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("8000"), "{}", stderr(&out));
}

#[test]
fn bad_thread_count_is_rejected() {
    let out = Command::new(env!("CARGO_BIN_EXE_c2datt"))
        .args(["params"])
        .env("C2DATT_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

fn field(line: &str, i: usize) -> usize {
    line.split_whitespace().nth(i).unwrap().parse().unwrap()
}

#[test]
fn params_total_is_sum_of_layers() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("m.toml");
    std::fs::write(&cfg, "width = 16\n[attention]\nvariant = \"c2d\"\n").unwrap();
    let stdout = ok(&c2datt(&["params", "--model-config", s(&cfg)]));
    let layers: usize = stdout.lines().filter(|l| l.starts_with("layer ")).map(|l| field(l, 2)).sum();
    let total = stdout.lines().find(|l| l.starts_with("total ")).map(|l| field(l, 1)).unwrap();
    assert_eq!(layers, total);
    let att: Vec<&str> = stdout.lines().filter(|l| l.starts_with("attention res")).collect();
    // 3 + 4 + 6 + 3 residual blocks at depth 34.
    assert_eq!(att.len(), 16);
    for l in att {
        assert_eq!(field(l, 3), 144, "{l}");
    }
}

#[test]
fn params_rejects_unknown_keys() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("m.toml");
    std::fs::write(&cfg, "widht = 16\n").unwrap();
    let out = c2datt(&["params", "--model-config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("widht"), "{}", stderr(&out));
}

#[test]
fn train_writes_metrics_and_checkpoints() {
    let t = trained();
    assert!(t.train_stdout.contains("final epoch accuracy"), "{}", t.train_stdout);
    assert!(t.ckpt().is_file());
    assert!(t.path("run/epoch_001.ckpt").is_file());
    assert!(t.path("run/epoch_002.ckpt").is_file());

    let csv = std::fs::read_to_string(t.path("run/metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,epoch,lr,loss,acc"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    // 6 training utterances in batches of 4, last partial batch kept.
    assert_eq!(rows.len(), 4);
    let cfg = TrainConfig::load(&t.path("train.toml")).unwrap();
    for (i, r) in rows.iter().enumerate() {
        let (step, epoch): (u64, u64) = (r[0].parse().unwrap(), r[1].parse().unwrap());
        assert_eq!(step, i as u64);
        assert_eq!(epoch, 1 + i as u64 / 2);
        let lr: f64 = r[2].parse().unwrap();
        let want = lr_at(&cfg, step, epoch);
        assert!((lr - want).abs() <= 1e-9 * want.max(1e-12), "row {i}: {lr} vs {want}");
        let acc: f64 = r[4].parse().unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
}

#[test]
fn training_is_reproducible_under_a_fixed_seed() {
    let t = trained();
    ok(&train_into(t.dir.path(), "rerun", "7"));
    let a = std::fs::read(t.path("run/metrics.csv")).unwrap();
    let b = std::fs::read(t.path("rerun/metrics.csv")).unwrap();
    assert_eq!(a, b);
    assert_eq!(std::fs::read(t.ckpt()).unwrap(), std::fs::read(t.path("rerun/final.ckpt")).unwrap());
}

#[test]
fn manifest_with_a_speaker_gap_is_rejected() {
    let t = trained();
    let dir = TempDir::new().unwrap();
    let text = std::fs::read_to_string(t.path("corpus/train.tsv")).unwrap();
    let gapped: String = text.lines().filter(|l| !l.starts_with("1\t")).map(|l| format!("{l}\n")).collect();
    std::fs::create_dir_all(dir.path().join("corpus")).unwrap();
    std::fs::write(dir.path().join("corpus/train.tsv"), gapped).unwrap();
    write_configs(dir.path());
    let out = train_into(dir.path(), "run", "1");
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("missing"), "{}", stderr(&out));
    assert!(!dir.path().join("run/final.ckpt").exists());
}

#[test]
fn train_reports_every_config_problem_at_once() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("model.toml"), "depth = 35\n").unwrap();
    std::fs::write(dir.path().join("train.toml"), "batch_size = 0\n").unwrap();
    std::fs::create_dir_all(dir.path().join("corpus")).unwrap();
    std::fs::write(dir.path().join("corpus/train.tsv"), "").unwrap();
    let out = train_into(dir.path(), "run", "1");
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("depth") && err.contains("batch_size"), "{err}");
}

#[test]
fn embed_segments_long_utterances() {
    let t = trained();
    let dir = TempDir::new().unwrap();
    let wav = dir.path().join("long.wav");
    voice_wav(&wav, 10.0, 16_000, 3);
    let out = dir.path().join("e.emb");
    let stdout = ok(&c2datt(&["embed", "--ckpt", s(&t.ckpt()), "--wav", s(&wav), "--out", s(&out)]));
    assert!(stdout.contains("3 segments x 8"), "{stdout}");
    let store = EmbeddingStore::load(&out).unwrap();
    assert_eq!(store.get(s(&wav)).unwrap().segments.len(), 3);
}

fn percent(stdout: &str, key: &str) -> Option<f64> {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix(key))
        .map(|v| v.trim().trim_end_matches('%').parse().unwrap())
}

#[test]
fn eval_matches_library_metrics() {
    let t = trained();
    let trials_path = t.path("corpus/trials.txt");
    let out = t.path("eval_raw.scores");
    let stdout = ok(&c2datt(&[
        "eval",
        "--ckpt",
        s(&t.ckpt()),
        "--trials",
        s(&trials_path),
        "--no-asnorm",
        "--out",
        s(&out),
    ]));
    assert!(percent(&stdout, "EER(as-norm):").is_none());

    let (model, meta) = load_checkpoint(&t.ckpt()).unwrap();
    let fb = Fbank::new(&meta.features).unwrap();
    let trials = read_trials(&trials_path).unwrap();
    let mut store = EmbeddingStore::default();
    for tr in &trials {
        for k in [&tr.enroll, &tr.test] {
            let w = c2datt::frontend::read_wav(Path::new(k), 16_000).unwrap();
            store.insert(k.clone(), embed_utterance(&model, &fb, &w).unwrap());
        }
    }
    let lines = score_trials(&trials, &store, None).unwrap();
    let m = metrics(&label_scores(&trials, &lines, false).unwrap()).unwrap();
    let printed = percent(&stdout, "EER(raw):").unwrap();
    assert!((printed - 100.0 * m.eer).abs() < EER_PRINT_TOL, "{printed} vs {}", 100.0 * m.eer);
}

#[test]
fn eval_with_cohort_reports_normalized_metrics() {
    let t = trained();
    let out = t.path("eval_norm.scores");
    let stdout = ok(&c2datt(&[
        "eval",
        "--ckpt",
        s(&t.ckpt()),
        "--trials",
        s(&t.path("corpus/trials.txt")),
        "--cohort",
        s(&t.path("corpus/cohort.lst")),
        "--topk",
        "5",
        "--out",
        s(&out),
    ]));
    let e = percent(&stdout, "EER(as-norm):").unwrap();
    assert!((0.0..=100.0).contains(&e));
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 6);
}

#[test]
fn score_rejects_unknown_utterances() {
    let t = trained();
    let dir = TempDir::new().unwrap();
    let trials = dir.path().join("t.txt");
    std::fs::write(&trials, "1 /no/such/a.wav /no/such/b.wav\n").unwrap();
    let out = c2datt(&[
        "score",
        "--ckpt",
        s(&t.ckpt()),
        "--trials",
        s(&trials),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("/no/such/a.wav"));
}

/// Untrained checkpoint of a small model with the given attention variant.
fn variant_ckpt(dir: &Path, variant: Variant) -> PathBuf {
    let cfg = ModelConfig {
        asp_bottleneck: 8,
        ..ModelConfig::new(34, 8, 16, 8, AttentionConfig::new(variant, Pooling::Std))
    };
    let feats = FeatureConfig {
        n_mels: 16,
        ..FeatureConfig::default()
    };
    let p = dir.join(format!("{}.ckpt", variant.name()));
    Model::<f32>::new(&cfg, 3).unwrap().save(&p, &feats, 0, 0).unwrap();
    p
}

fn read_map(path: &Path) -> Vec<Vec<f64>> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("freq\\channel,c0"));
    lines
        .map(|l| l.split(',').skip(1).map(|v| v.parse().unwrap()).collect())
        .collect()
}

fn attmap(ckpt: &Path, wav: &Path, block: &str, out: &Path) -> Output {
    c2datt(&["attmap", "--ckpt", s(ckpt), "--wav", s(wav), "--block", block, "--out", s(out)])
}

#[test]
fn attention_maps_have_the_expected_structure() {
    let dir = TempDir::new().unwrap();
    let wav = dir.path().join("v.wav");
    voice_wav(&wav, 2.0, 16_000, 4);
    for variant in [Variant::Se, Variant::Fwse, Variant::C2d] {
        let ckpt = variant_ckpt(dir.path(), variant);
        let out = dir.path().join(format!("{}.csv", variant.name()));
        let stdout = ok(&attmap(&ckpt, &wav, "res2.last", &out));
        assert!(stdout.starts_with("res2.3:"), "{stdout}");
        let map = read_map(&out);
        // Stage 2 of an 8-wide, 16-mel model: 8 frequency rows, 16 channels.
        assert_eq!((map.len(), map[0].len()), (8, 16));
        assert!(map.iter().flatten().all(|&v| v > 0.0 && v < 1.0));
        let rows_equal = map.iter().all(|r| r == &map[0]);
        let cols_equal = map.iter().all(|r| r.iter().all(|v| v == &r[0]));
        match variant {
            Variant::Se => assert!(rows_equal && !cols_equal),
            Variant::Fwse => assert!(cols_equal && !rows_equal),
            _ => assert!(!rows_equal && !cols_equal),
        }
    }
}

#[test]
fn attmap_rejects_unknown_blocks_and_plain_models() {
    let dir = TempDir::new().unwrap();
    let wav = dir.path().join("v.wav");
    voice_wav(&wav, 1.5, 16_000, 5);
    let ckpt = variant_ckpt(dir.path(), Variant::C2d);
    let out = attmap(&ckpt, &wav, "res9.0", &dir.path().join("x.csv"));
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("res9.0"));
    let plain = variant_ckpt(dir.path(), Variant::None);
    let out = attmap(&plain, &wav, "res1.0", &dir.path().join("y.csv"));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn attmap_writes_pgm() {
    let dir = TempDir::new().unwrap();
    let wav = dir.path().join("v.wav");
    voice_wav(&wav, 1.5, 16_000, 6);
    let ckpt = variant_ckpt(dir.path(), Variant::C2d);
    let pgm = dir.path().join("m.pgm");
    let out = c2datt(&[
        "attmap",
        "--ckpt",
        s(&ckpt),
        "--wav",
        s(&wav),
        "--block",
        "res1.0",
        "--out",
        s(&dir.path().join("m.csv")),
        "--pgm",
        s(&pgm),
    ]);
    ok(&out);
    let img = std::fs::read_to_string(&pgm).unwrap();
    assert!(img.starts_with("P2\n8 16\n255\n"), "{}", &img[..20]);
    assert_eq!(img.lines().count(), 3 + 16);
}
