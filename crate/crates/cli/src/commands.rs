use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use c2datt::checkpoint::{TensorFile, MAGIC};
use c2datt::frontend::{read_wav, write_features, Fbank, FeatureConfig};
use c2datt::model::{load_checkpoint, CheckpointMeta, Model, ModelConfig};
use c2datt::pipeline::{embed_utterance, metrics};
use c2datt::scoring::{label_scores, read_trials, score_trials, write_scores, Cohort, EmbeddingStore, UtteranceEmbedding};
use c2datt::synth::{write_corpus, CorpusConfig};
use c2datt::train::{AugmentPools, SpeakerDataset, TrainConfig, Trainer};
use c2datt::{Error, Result};
use rayon::prelude::*;

use crate::{Command, ScoreArgs};

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Feats { wav, config, out } => feats(&wav, config.as_deref(), &out),
        Command::Train {
            manifest,
            model_config,
            train_config,
            out_dir,
            seed,
        } => train(&manifest, &model_config, &train_config, &out_dir, seed),
        Command::Embed { ckpt, wav, list, out } => embed(&ckpt, wav, list.as_deref(), &out),
        Command::Score(a) => score(&a, false),
        Command::Eval(a) => score(&a, true),
        Command::Attmap {
            ckpt,
            wav,
            block,
            out,
            pgm,
        } => attmap(&ckpt, &wav, &block, &out, pgm.as_deref()),
        Command::Params { model_config } => params(model_config.as_deref()),
        Command::Synth {
            out_dir,
            speakers,
            utts,
            held_out,
            min_seconds,
            max_seconds,
            target_trials,
            nontarget_trials,
            seed,
        } => {
            let cfg = CorpusConfig {
                n_speakers: speakers,
                utts_per_speaker: utts,
                held_out,
                min_seconds,
                max_seconds,
                target_trials,
                nontarget_trials,
                seed,
                ..CorpusConfig::default()
            };
            synth(&out_dir, &cfg)
        }
    }
}

fn io_err(context: String) -> impl FnOnce(std::io::Error) -> Error {
    move |source| Error::Io { context, source }
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{}: no such file", path.display())))
    }
}

fn read_path_list(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(io_err(format!("reading {}", path.display())))?;
    let items: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
    if items.is_empty() {
        return Err(Error::InvalidInput(format!("{}: empty list", path.display())));
    }
    Ok(items)
}

fn feats(wav: &Path, config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = match config {
        Some(p) => FeatureConfig::load(p)?,
        None => FeatureConfig::default(),
    };
    let w = read_wav(wav, cfg.sample_rate)?;
    let f = Fbank::new(&cfg)?.compute(&w)?;
    write_features(out, &f)?;
    println!("{} x {}", f.shape()[0], f.shape()[1]);
    Ok(())
}

fn train(manifest: &Path, model_config: &Path, train_config: &Path, out_dir: &Path, seed: Option<u64>) -> Result<()> {
    // Collect every configuration problem before doing any work.
    let mut problems = Vec::new();
    let read = |p: &Path, problems: &mut Vec<String>| match std::fs::read_to_string(p) {
        Ok(t) => Some(t),
        Err(e) => {
            problems.push(format!("{}: {e}", p.display()));
            None
        }
    };
    let mcfg: Option<ModelConfig> = read(model_config, &mut problems).and_then(|t| match toml::from_str(&t) {
        Ok(c) => Some(c),
        Err(e) => {
            problems.push(format!("{}: {e}", model_config.display()));
            None
        }
    });
    let tcfg: Option<TrainConfig> = read(train_config, &mut problems).and_then(|t| match toml::from_str(&t) {
        Ok(c) => Some(c),
        Err(e) => {
            problems.push(format!("{}: {e}", train_config.display()));
            None
        }
    });
    if let Some(m) = &mcfg {
        problems.extend(m.problems());
    }
    if let Some(t) = &tcfg {
        problems.extend(t.problems());
    }
    if let (Some(m), Some(t)) = (&mcfg, &tcfg) {
        if m.in_mels != t.features.n_mels {
            problems.push(format!(
                "features.n_mels = {} but model.in_mels = {}",
                t.features.n_mels, m.in_mels
            ));
        }
    }
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let (mcfg, mut tcfg) = (mcfg.unwrap(), tcfg.unwrap());
    if let Some(s) = seed {
        tcfg.seed = s;
    }
    let data = SpeakerDataset::from_manifest(manifest, tcfg.features.sample_rate)?;
    let pools = AugmentPools::load(&tcfg.augment, tcfg.features.sample_rate)?;
    let model = Model::new(&mcfg, tcfg.seed)?;
    eprintln!(
        "training on {} utterances from {} speakers, {} trainable parameters",
        data.len(),
        data.n_speakers,
        model.num_trainable()
    );
    let mut trainer = Trainer::new(model, data.n_speakers, tcfg, pools)?;
    let records = trainer.run(&data, Some(out_dir))?;
    if let Some(last) = records.last() {
        let tail: Vec<_> = records.iter().filter(|r| r.epoch == last.epoch).collect();
        let acc = tail.iter().map(|r| r.acc).sum::<f64>() / tail.len() as f64;
        println!(
            "finished {} steps, {} epochs; final epoch accuracy {:.4}",
            trainer.step(),
            trainer.epoch(),
            acc
        );
    }
    println!("checkpoint: {}", out_dir.join("final.ckpt").display());
    Ok(())
}

fn load_model(ckpt: &Path) -> Result<(Model<f32>, CheckpointMeta, Fbank)> {
    require_file(ckpt)?;
    let (model, meta) = load_checkpoint(ckpt)?;
    if meta.features.n_mels != meta.model.in_mels {
        return Err(Error::CorruptCheckpoint(format!(
            "{}: stored features have {} mels but the model expects {}",
            ckpt.display(),
            meta.features.n_mels,
            meta.model.in_mels
        )));
    }
    let fbank = Fbank::new(&meta.features)?;
    Ok((model, meta, fbank))
}

fn embed_paths(model: &Model<f32>, fbank: &Fbank, paths: &[String]) -> Result<Vec<UtteranceEmbedding>> {
    let rate = fbank.config().sample_rate;
    paths
        .par_iter()
        .map(|p| embed_utterance(model, fbank, &read_wav(Path::new(p), rate)?))
        .collect()
}

fn embed(ckpt: &Path, wav: Option<PathBuf>, list: Option<&Path>, out: &Path) -> Result<()> {
    let (model, _, fbank) = load_model(ckpt)?;
    let paths = match (wav, list) {
        (Some(w), _) => vec![w.display().to_string()],
        (None, Some(l)) => read_path_list(l)?,
        (None, None) => return Err(Error::InvalidInput("pass --wav or --list".into())),
    };
    let embs = embed_paths(&model, &fbank, &paths)?;
    let mut store = EmbeddingStore::default();
    for (p, e) in paths.iter().zip(embs) {
        println!("{p}: {} segments x {}", e.segments.len(), e.mean.len());
        store.insert(p.clone(), e);
    }
    store.save(out)
}

fn is_tensor_file(path: &Path) -> Result<bool> {
    let bytes = std::fs::read(path).map_err(io_err(format!("reading {}", path.display())))?;
    Ok(bytes.starts_with(MAGIC))
}

fn score(a: &ScoreArgs, report: bool) -> Result<()> {
    let trials = read_trials(&a.trials)?;
    let targets = trials.iter().filter(|t| t.target).count();
    if report && (targets == 0 || targets == trials.len()) {
        return Err(Error::InvalidInput(
            "trial list needs both target and nontarget trials".into(),
        ));
    }
    let mut store = match &a.embeddings {
        Some(p) => EmbeddingStore::load(p)?,
        None => EmbeddingStore::default(),
    };
    let model = a.ckpt.as_deref().map(load_model).transpose()?;
    let needed: BTreeSet<&str> = trials
        .iter()
        .flat_map(|t| [t.enroll.as_str(), t.test.as_str()])
        .filter(|k| store.get(k).is_none())
        .collect();
    if !needed.is_empty() {
        if let Some((m, _, fb)) = &model {
            let missing: Vec<&str> = needed.iter().copied().filter(|k| !Path::new(k).is_file()).collect();
            if !missing.is_empty() {
                return Err(Error::Config(
                    missing.iter().map(|m| format!("utterance not found: {m}")).collect(),
                ));
            }
            let keys: Vec<String> = needed.iter().map(|s| s.to_string()).collect();
            for (k, e) in keys.iter().zip(embed_paths(m, fb, &keys)?) {
                store.insert(k.clone(), e);
            }
        }
    }

    let cohort_embs: Option<Vec<Vec<f32>>> = match (&a.cohort, a.no_asnorm) {
        (Some(p), false) => Some(if is_tensor_file(p)? {
            EmbeddingStore::from_tensor_file(&TensorFile::load(p)?)?
                .items
                .into_values()
                .map(|u| u.mean)
                .collect()
        } else {
            let (m, _, fb) = model
                .as_ref()
                .ok_or_else(|| Error::InvalidInput("a WAV cohort list needs --ckpt".into()))?;
            embed_paths(m, fb, &read_path_list(p)?)?.into_iter().map(|u| u.mean).collect()
        }),
        _ => None,
    };
    let cohort = cohort_embs.as_deref().map(|e| Cohort {
        embeddings: e,
        top_k: a.topk,
    });
    let lines = score_trials(&trials, &store, cohort.as_ref())?;
    write_scores(&a.out, &lines)?;
    if report {
        let mut out = String::new();
        let _ = writeln!(out, "trials: {} ({} target, {} nontarget)", trials.len(), targets, trials.len() - targets);
        let raw = metrics(&label_scores(&trials, &lines, false)?)?;
        let _ = writeln!(out, "EER(raw): {:.4}%", 100.0 * raw.eer);
        let _ = writeln!(out, "minDCF(raw): {:.6}", raw.min_dcf);
        if cohort.is_some() {
            let n = metrics(&label_scores(&trials, &lines, true)?)?;
            let _ = writeln!(out, "EER(as-norm): {:.4}%", 100.0 * n.eer);
            let _ = writeln!(out, "minDCF(as-norm): {:.6}", n.min_dcf);
        }
        print!("{out}");
    } else {
        println!("wrote {} scores to {}", lines.len(), a.out.display());
    }
    Ok(())
}

/// Resolves `res{stage}.{block}` / `res{stage}.last` against the model's blocks.
fn resolve_block(ids: &[String], block: &str) -> Result<String> {
    let unknown = || {
        Error::InvalidInput(format!(
            "unknown block `{block}`; expected res<stage>.<index> or res<stage>.last, e.g. {}",
            ids.first().map_or("res1.0", String::as_str)
        ))
    };
    let (stage, idx) = block.split_once('.').ok_or_else(unknown)?;
    let resolved = if idx == "last" {
        ids.iter().filter(|id| id.split_once('.').is_some_and(|(s, _)| s == stage)).last().cloned()
    } else {
        ids.iter().find(|id| id.as_str() == block).cloned()
    };
    resolved.ok_or_else(unknown)
}

fn attmap(ckpt: &Path, wav: &Path, block: &str, out: &Path, pgm: Option<&Path>) -> Result<()> {
    let (model, meta, fbank) = load_model(ckpt)?;
    let id = resolve_block(&model.block_ids(), block)?;
    let stage: usize = id[3..4].parse().expect("block id");
    let c = meta.model.stage_channels(stage - 1);
    let f = meta.model.stage_freq(stage - 1);
    let plane = attention_plane(&model, &fbank, wav, &id)?;
    let plane = match plane {
        Some(p) => p,
        None => {
            return Err(Error::InvalidInput(format!(
                "model uses attention variant `{}`, which produces no weights",
                meta.model.attention.variant.name()
            )))
        }
    };
    // plane is [C, F]; write frequency rows by channel columns.
    let mut csv = String::from("freq\\channel");
    for ch in 0..c {
        let _ = write!(csv, ",c{ch}");
    }
    csv.push('\n');
    for fi in 0..f {
        let _ = write!(csv, "f{fi}");
        for ch in 0..c {
            let _ = write!(csv, ",{}", plane[ch * f + fi]);
        }
        csv.push('\n');
    }
    std::fs::write(out, csv).map_err(io_err(format!("writing {}", out.display())))?;
    if let Some(p) = pgm {
        let mut img = format!("P2\n{c} {f}\n255\n");
        // Highest frequency on the top row.
        for fi in (0..f).rev() {
            let row: Vec<String> = (0..c)
                .map(|ch| ((plane[ch * f + fi] as f64).clamp(0.0, 1.0) * 255.0).round().to_string())
                .collect();
            let _ = writeln!(img, "{}", row.join(" "));
        }
        std::fs::write(p, img).map_err(io_err(format!("writing {}", p.display())))?;
    }
    println!("{id}: {f} x {c} (freq x channel) -> {}", out.display());
    Ok(())
}

/// Attention weights of `block` for a whole utterance, broadcast to a
/// `[C, F]` plane.
fn attention_plane(model: &Model<f32>, fbank: &Fbank, wav: &Path, block: &str) -> Result<Option<Vec<f32>>> {
    use c2datt::autograd::Graph;
    use c2datt::model::Mode;
    let w = read_wav(wav, fbank.config().sample_rate)?;
    let feats = fbank.compute(&w)?;
    let (nf, nt) = (feats.shape()[0], feats.shape()[1]);
    let mut g = Graph::new();
    let x = g.constant(feats.reshape(&[1, nf, nt])?);
    let out = model.forward(&mut g, x, Mode::Eval)?;
    let Some((_, v)) = out.attention.iter().find(|(b, _)| b == block) else {
        return Ok(None);
    };
    let cfg = model.config();
    let stage: usize = block[3..4].parse().expect("block id");
    let (c, f) = (cfg.stage_channels(stage - 1), cfg.stage_freq(stage - 1));
    let t = g.value(*v);
    let d = t.data();
    let plane = match t.shape() {
        [1, cc, ff] if *cc == c && *ff == f => d.to_vec(),
        [1, cc] if *cc == c => (0..c * f).map(|i| d[i / f]).collect(),
        [1, ff] if *ff == f => (0..c * f).map(|i| d[i % f]).collect(),
        s => return Err(Error::Shape(format!("unexpected attention shape {s:?}"))),
    };
    Ok(Some(plane))
}

fn params(model_config: Option<&Path>) -> Result<()> {
    let cfg = match model_config {
        Some(p) => ModelConfig::load(p)?,
        None => ModelConfig::default(),
    };
    let model = Model::<f32>::new(&cfg, 0)?;
    let mut out = String::new();
    let report = model.param_report();
    let width = report.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(16);
    for (layer, n) in &report {
        let _ = writeln!(out, "layer {layer:<width$} {n}");
    }
    let total: usize = report.iter().map(|r| r.1).sum();
    let _ = writeln!(out, "total {total}");
    let att = model.attention_report();
    for (block, w, a) in &att {
        let _ = writeln!(out, "attention {block} weights {w} affine {a}");
    }
    let (tw, ta) = att.iter().fold((0, 0), |(x, y), r| (x + r.1, y + r.2));
    let _ = writeln!(out, "attention_total weights {tw} affine {ta}");
    print!("{out}");
    Ok(())
}

fn synth(out_dir: &Path, cfg: &CorpusConfig) -> Result<()> {
    let files = write_corpus(out_dir, cfg)?;
    println!("manifest: {}", files.train_manifest.display());
    println!("trials: {}", files.trials.display());
    println!("eval list: {}", files.eval_list.display());
    println!("cohort list: {}", files.cohort_list.display());
    println!("noise list: {}", files.noise_list.display());
    println!("rir list: {}", files.rir_list.display());
    Ok(())
}
