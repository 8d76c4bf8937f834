//! Acceptance checks, one line per criterion. Pass criterion numbers as
//! arguments to run a subset: `cargo test --test acceptance -- 1 3 10`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use ned_core::attention::kg2ent;
use ned_core::corpus::{Corpus, Gender, Mention, Page, Sentence};
use ned_core::encoder::Vocab;
use ned_core::evalsuite::{evaluate, micro_prf, report, slice_assign, FilterStats, Scored, Slice};
use ned_core::kb::{load_kb, popularity_counts, EntityId, KbPaths, LoadOptions, StructuredKB};
use ned_core::model::{MentionFilter, Model};
use ned_core::numerics::{primitive_suite, Graph, Tensor};
use ned_core::rng;
use ned_core::syncorpus::{generate_all, kb_paths, GenParams};
use ned_core::trainer::checkpoint::to_bytes;
use ned_core::trainer::{
    load_checkpoint, model_grad_check, reg_prob, save_checkpoint, train, RegScheme, TrainConfig, TrainOptions,
};
use ned_core::weaklabel::weak_label_corpus;
use rand::Rng;

type Outcome = Result<(bool, String)>;

fn main() -> ExitCode {
    let wanted: BTreeSet<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(usize, &str, fn() -> Outcome); 10] = [
        (1, "gradient integrity", gradient_integrity),
        (2, "schedule anchors", schedule_anchors),
        (3, "kg2ent algebra", kg2ent_algebra),
        (4, "tail generalisation", tail_generalisation),
        (5, "regularisation direction", regularisation_direction),
        (6, "weak labelling", weak_labelling),
        (7, "metrics oracle", metrics_oracle),
        (8, "compression", compression),
        (9, "determinism and persistence", determinism),
        (10, "forward oracle", forward_oracle),
    ];
    let mut failed = 0;
    for (n, name, f) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let (ok, detail) = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(Ok(r)) => r,
            Ok(Err(e)) => (false, format!("error: {e:#}")),
            Err(_) => (false, "panicked".to_string()),
        };
        failed += usize::from(!ok);
        println!(
            "criterion {n:>2} {name}: {} ({detail}; {:.1}s)",
            if ok { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

fn ned(args: &[&str]) -> Result<String> {
    let out = Command::new(env!("CARGO_BIN_EXE_ned")).args(args).output()?;
    ensure!(
        out.status.success(),
        "ned {}: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    Ok(String::from_utf8(out.stdout)?)
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

// 1

fn gradient_integrity() -> Outcome {
    let start = Instant::now();
    let mut worst = ("", 0.0f64);
    for (name, err) in primitive_suite(7)? {
        if err > worst.1 {
            worst = (name, err);
        }
    }
    let dir = tempfile::tempdir()?;
    let params = GenParams {
        n_entities: 15,
        n_types: 6,
        n_relations: 5,
        n_sentences: 40,
        k_ambiguity: 3,
        seed: 7,
        ..GenParams::default()
    };
    let (_, syn) = generate_all(&params, dir.path())?;
    let kb = load_kb(&kb_paths(dir.path()), &LoadOptions::default())?;
    let cfg = TrainConfig {
        hidden: 8,
        d_entity: 4,
        d_type: 4,
        d_relation: 4,
        d_coarse: 4,
        ff_dim: 8,
        heads: 2,
        candidates: 3,
        encoder_layers: 1,
        freeze_encoder: false,
        ..TrainConfig::default()
    };
    let mut model: Model<f64> = Model::new(cfg, Vocab::build(&syn.train), &kb)?;
    let sentence = syn
        .train
        .sentences
        .iter()
        .find(|s| s.mentions.len() >= 2)
        .context("no two-mention sentence")?;
    let inst = model
        .prepare(sentence, &kb, MentionFilter::Train)?
        .context("no usable mention")?;
    let report = model_grad_check(&mut model, &inst, None, 1e-5)?;
    let secs = start.elapsed().as_secs_f64();
    let ok = worst.1 < 1e-4 && report.max_rel_error < 1e-4 && secs < 60.0;
    Ok((
        ok,
        format!(
            "worst primitive {} {:.2e}, model {:.2e} over {} coordinates, {secs:.1}s",
            worst.0, worst.1, report.max_rel_error, report.checked
        ),
    ))
}

// 2

fn schedule_anchors() -> Outcome {
    let p = |c, s| reg_prob(c, s, 0);
    let in_band = |x: f64| (0.049..=0.051).contains(&x);
    let power = p(1, RegScheme::InvPopPower) == 0.95 && in_band(p(10_000, RegScheme::InvPopPower));
    let linear = p(1, RegScheme::InvPopLinear) == 0.95 && in_band(p(10_000, RegScheme::InvPopLinear));
    let log_hi = p(1, RegScheme::InvPopLog);
    let log_lo = p(10_000, RegScheme::InvPopLog);
    let log = (log_hi - 0.95).abs() <= 0.02 && (log_lo - 0.05).abs() <= 0.02;
    let mut monotone = true;
    for scheme in [RegScheme::InvPopPower, RegScheme::InvPopLinear, RegScheme::InvPopLog] {
        let mut prev = f64::INFINITY;
        for c in 1..=1_000_000u64 {
            let x = p(c, scheme);
            monotone &= x <= prev;
            prev = x;
        }
    }
    Ok((
        power && linear && log && monotone,
        format!(
            "power {:.4}, linear {:.4}, log {log_hi:.4}/{log_lo:.4}, monotone {monotone}",
            p(10_000, RegScheme::InvPopPower),
            p(10_000, RegScheme::InvPopLinear)
        ),
    ))
}

// 3

fn random_tensor<R: Rng>(r: &mut R, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::new(
        vec![rows, cols],
        (0..rows * cols).map(|_| r.random_range(lo..hi)).collect(),
    )
    .expect("shape")
}

fn kg2ent_value(e: &Tensor<f64>, adj: &Tensor<f64>, w: f64, mask: Option<&[bool]>) -> Result<Tensor<f64>> {
    let mut g = Graph::new();
    let ev = g.constant(e.clone());
    let av = g.constant(adj.clone());
    let wv = g.constant(Tensor::scalar(w));
    let out = kg2ent(&mut g, ev, av, wv, mask)?;
    Ok(g.value(out).clone())
}

fn kg2ent_algebra() -> Outcome {
    let mut r = rng::stream(3, "acceptance.kg2ent");
    let mut worst_sum = 0.0f64;
    for trial in 0..50 {
        let n = r.random_range(2..12);
        let adj = random_tensor(&mut r, n, n, 0.0, 3.0);
        let w = r.random_range(-5.0..5.0);
        let mask: Vec<bool> = (0..n).map(|j| j == 0 || r.random_bool(0.7)).collect();
        let mask = if trial % 2 == 0 { None } else { Some(&mask[..]) };
        // With E = I the output is mix + I, so each row of the mixing
        // matrix is the output row minus the identity.
        let eye = Tensor::new(
            vec![n, n],
            (0..n * n).map(|i| f64::from(u8::from(i / n == i % n))).collect(),
        )?;
        let out = kg2ent_value(&eye, &adj, w, mask)?;
        for i in 0..n {
            let sum: f64 = (0..n).map(|j| out.row(i)[j] - eye.row(i)[j]).sum();
            worst_sum = worst_sum.max((sum - 1.0).abs());
        }
    }
    let mut worst_double = 0.0f64;
    for _ in 0..50 {
        let n = r.random_range(2..30);
        let d = r.random_range(1..10);
        let e = random_tensor(&mut r, n, d, -10.0, 10.0);
        let out = kg2ent_value(&e, &Tensor::zeros(&[n, n]), 20.0, None)?;
        for (a, b) in out.data().iter().zip(e.data()) {
            worst_double = worst_double.max((a - 2.0 * b).abs());
        }
    }
    Ok((
        worst_sum <= 1e-12 && worst_double < 1e-6,
        format!("max |row sum - 1| {worst_sum:.1e}, max |E_k - 2E| {worst_double:.1e}"),
    ))
}

// 4 and 5

struct Syn {
    _dir: tempfile::TempDir,
    kb: StructuredKB,
    train: Corpus,
    test: Corpus,
}

fn default_syncorpus() -> Result<Syn> {
    let dir = tempfile::tempdir()?;
    let (_, syn) = generate_all(&GenParams::default(), dir.path())?;
    let mut kb = load_kb(&kb_paths(dir.path()), &LoadOptions::default())?;
    kb.set_popularity(popularity_counts(&syn.train, &kb)?);
    Ok(Syn {
        _dir: dir,
        kb,
        train: syn.train,
        test: syn.test,
    })
}

/// Settings for the synthetic runs; the rest are library defaults.
fn syn_config(seed: u64) -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        epochs: 12,
        heads: 4,
        type_prediction: false,
        seed,
        ..TrainConfig::default()
    }
}

/// Unseen-slice accuracy and the train + eval time.
fn unseen_accuracy(syn: &Syn, cfg: TrainConfig) -> Result<(f64, usize, f64)> {
    let start = Instant::now();
    let (model, _) = train(&syn.train, &syn.kb, cfg, &TrainOptions::default())?;
    let r = evaluate(&model, &syn.test, &syn.kb, &BTreeMap::new())?;
    let m = r.metrics(Slice::Unseen.as_str()).context("empty unseen slice")?;
    Ok((
        m.n_correct as f64 / m.n_mentions as f64,
        m.n_mentions,
        start.elapsed().as_secs_f64(),
    ))
}

fn tail_generalisation() -> Outcome {
    let syn = default_syncorpus()?;
    let (full, n, secs) = unseen_accuracy(&syn, syn_config(7))?;
    let ent_only = TrainConfig {
        use_type: false,
        use_kg: false,
        ..syn_config(7)
    };
    let (ent, _, _) = unseen_accuracy(&syn, ent_only)?;
    let gap = 100.0 * (full - ent);
    let ok = full >= 0.85 && ent <= 0.40 && gap >= 30.0 && secs < 900.0;
    Ok((
        ok,
        format!(
            "full {:.1}%, ent-only {:.1}% on {n} unseen mentions, gap {gap:.1} points, full model train+eval {secs:.0}s",
            100.0 * full,
            100.0 * ent
        ),
    ))
}

fn regularisation_direction() -> Outcome {
    let syn = default_syncorpus()?;
    let mut ok = true;
    let mut parts = Vec::new();
    for seed in [7, 11, 13] {
        let run = |reg| {
            let cfg = TrainConfig {
                reg,
                ..syn_config(seed)
            };
            unseen_accuracy(&syn, cfg).map(|r| 100.0 * r.0)
        };
        let inv = run(RegScheme::InvPopPower)?;
        let zero = run(RegScheme::Fixed(0.0))?;
        let pop = run(RegScheme::PopPower)?;
        ok &= inv - zero >= 10.0 && inv - pop >= 5.0;
        parts.push(format!("seed {seed}: inv_pop {inv:.1} fixed(0) {zero:.1} pop {pop:.1}"));
    }
    Ok((ok, parts.join("; ")))
}

// 6

fn weak_labelling() -> Outcome {
    let dir = tempfile::tempdir()?;
    fs::write(
        dir.path().join("aliases.tsv"),
        "marie curie\tmarie_curie\t9\ncurie\tmarie_curie\t5\ncurie\tpierre_curie\t4\npierre curie\tpierre_curie\t6\n\
         paris\tparis\t20\nsorbonne\tsorbonne\t3\nwarsaw\twarsaw\t4\nradium\tradium\t2\n",
    )?;
    let kb = load_kb(&KbPaths::in_dir(dir.path()), &LoadOptions::default())?;
    let page = |key: &str, gender, aliases: &[&str]| Page {
        page: key.to_string(),
        gender,
        aliases: aliases.iter().map(|a| a.to_string()).collect(),
    };
    let pages = vec![
        page(
            "marie_curie",
            Some(Gender::Female),
            &["Marie Curie", "Curie", "Madame Curie"],
        ),
        page("pierre_curie", Some(Gender::Male), &["Pierre Curie", "Pierre"]),
        page("paris", None, &["Paris", "the city"]),
        page("ghost", Some(Gender::Male), &["visited"]),
    ];
    let sentence = |id, pg: &str, text, anchors: &[(usize, usize, &str)]| {
        let mut s = Sentence::new(id, text);
        s.page = Some(pg.to_string());
        s.mentions = anchors.iter().map(|&(a, b, g)| Mention::anchor(a, b, g)).collect();
        s
    };
    let corpus = Corpus::new(vec![
        sentence(
            0,
            "marie_curie",
            "Marie Curie was born in Warsaw",
            &[(0, 2, "marie_curie"), (5, 6, "warsaw")],
        ),
        sentence(
            1,
            "marie_curie",
            "She moved to Paris where Curie studied at the Sorbonne",
            &[(3, 4, "paris"), (9, 10, "sorbonne")],
        ),
        sentence(
            2,
            "marie_curie",
            "Her husband Pierre Curie worked with her on radium",
            &[(2, 4, "pierre_curie"), (8, 9, "radium")],
        ),
        sentence(
            3,
            "pierre_curie",
            "He died in Paris in 1906 and Marie Curie continued his work",
            &[(3, 4, "paris"), (7, 9, "marie_curie")],
        ),
        sentence(
            4,
            "paris",
            "The city hosted the Sorbonne where she taught",
            &[(4, 5, "sorbonne")],
        ),
        sentence(5, "ghost", "He visited Paris", &[(2, 3, "paris")]),
    ]);
    let (labelled, stats) = weak_label_corpus(&corpus, &pages, &kb);
    let got: BTreeSet<(u64, usize, usize, String)> = labelled
        .sentences
        .iter()
        .flat_map(|s| {
            s.mentions
                .iter()
                .filter(|m| m.weak)
                .map(move |m| (s.id, m.start, m.end, m.gold.clone()))
        })
        .collect();
    let want: BTreeSet<(u64, usize, usize, String)> = [
        (1, 0, 1, "marie_curie"),
        (1, 5, 6, "marie_curie"),
        (2, 0, 1, "marie_curie"),
        (2, 6, 7, "marie_curie"),
        (3, 0, 1, "pierre_curie"),
        (3, 10, 11, "pierre_curie"),
        (4, 0, 2, "paris"),
    ]
    .into_iter()
    .map(|(a, b, c, d)| (a, b, c, d.to_string()))
    .collect();
    let anchors_kept = labelled
        .sentences
        .iter()
        .zip(&corpus.sentences)
        .all(|(l, o)| o.mentions.iter().all(|m| l.mentions.contains(m)));
    let (again, _) = weak_label_corpus(&labelled, &pages, &kb);
    let idempotent = again == labelled;
    let ratio_ok = stats.before == 10 && stats.after == 17 && stats.ratio == 17.0 / 10.0;
    Ok((
        got == want && anchors_kept && idempotent && ratio_ok,
        format!(
            "{} of {} expected labels, {} extra, idempotent {idempotent}, {} -> {} mentions, ratio {}",
            got.intersection(&want).count(),
            want.len(),
            got.difference(&want).count(),
            stats.before,
            stats.after,
            stats.ratio
        ),
    ))
}

// 7

fn brute_prf(correct: usize, extracted: usize, gold: usize) -> (f64, f64, f64) {
    let precision = if extracted == 0 {
        0.0
    } else {
        correct as f64 / extracted as f64
    };
    let recall = if gold == 0 { 0.0 } else { correct as f64 / gold as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f1)
}

fn metrics_oracle() -> Outcome {
    let mut r = rng::stream(5, "acceptance.metrics");
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n_mentions = r.random_range(0..40usize);
        let mut draw = || -> BTreeSet<(usize, u32)> {
            let mut out = BTreeSet::new();
            for m in 0..n_mentions {
                if r.random_bool(0.8) {
                    out.insert((m, r.random_range(0..4)));
                }
            }
            out
        };
        let gold = draw();
        let pred = draw();
        let mut correct = 0;
        for p in &pred {
            if gold.iter().any(|g| g == p) {
                correct += 1;
            }
        }
        let (precision, recall, f1) = brute_prf(correct, pred.len(), gold.len());
        let got = micro_prf(pred.intersection(&gold).count(), pred.len(), gold.len())?;
        if (got.precision, got.recall, got.f1) != (precision, recall, f1) {
            mismatches += 1;
        }
    }

    // Per-slice reports against direct counting.
    let slices = [Slice::Unseen, Slice::Tail, Slice::Torso, Slice::Head];
    for _ in 0..200 {
        let scored: Vec<Scored> = (0..r.random_range(0..60usize))
            .map(|i| Scored {
                key: (i as u64, 0, 1),
                gold: EntityId(r.random_range(0..3)),
                predicted: EntityId(r.random_range(0..3)),
                slice: slices[r.random_range(0..4)],
            })
            .collect();
        let rep = report(scored.clone(), FilterStats::default(), &BTreeMap::new());
        for sl in slices {
            let rows: Vec<&Scored> = scored.iter().filter(|m| m.slice == sl).collect();
            let correct = rows.iter().filter(|m| m.gold == m.predicted).count();
            match rep.metrics(sl.as_str()) {
                None if rows.is_empty() => {}
                Some(m)
                    if m.n_mentions == rows.len()
                        && m.n_correct == correct
                        && (m.prf.precision, m.prf.recall, m.prf.f1) == brute_prf(correct, rows.len(), rows.len()) => {}
                _ => mismatches += 1,
            }
        }
    }

    let bounds = [
        (0, Slice::Unseen),
        (1, Slice::Tail),
        (10, Slice::Tail),
        (11, Slice::Torso),
        (1000, Slice::Torso),
        (1001, Slice::Head),
    ];
    let bounds_ok = bounds.iter().all(|&(c, sl)| slice_assign(c) == sl);
    Ok((
        mismatches == 0 && bounds_ok,
        format!("{mismatches} mismatches, slice boundaries ok {bounds_ok}"),
    ))
}

// 8

/// Shape and payload length of a named block in a checkpoint file.
fn checkpoint_block(bytes: &[u8], name: &str) -> Result<(Vec<u64>, usize)> {
    let mut pos = 4 + 4 + 8 + 1 + 1;
    let u32_at = |p: usize| u32::from_le_bytes(bytes[p..p + 4].try_into().expect("4 bytes")) as usize;
    pos += 4 + u32_at(pos);
    let blocks = u32_at(pos);
    pos += 4;
    for _ in 0..blocks {
        let len = u16::from_le_bytes(bytes[pos..pos + 2].try_into()?) as usize;
        let block = std::str::from_utf8(&bytes[pos + 2..pos + 2 + len])?;
        pos += 2 + len;
        let width = bytes[pos + 1] as usize;
        let rank = bytes[pos + 2] as usize;
        pos += 3;
        let dims: Vec<u64> = (0..rank)
            .map(|i| u64::from_le_bytes(bytes[pos + 8 * i..pos + 8 * i + 8].try_into().expect("8 bytes")))
            .collect();
        pos += 8 * rank;
        let payload = width * dims.iter().product::<u64>() as usize;
        if block == name {
            return Ok((dims, payload));
        }
        pos += payload;
    }
    bail!("no block {name}")
}

fn predictions(model: &Model<f64>, corpus: &Corpus, kb: &StructuredKB) -> Result<Vec<Vec<u64>>> {
    let mut out = Vec::new();
    for s in &corpus.sentences {
        if let Some(inst) = model.prepare(s, kb, MentionFilter::All)? {
            out.push(model.scores(&inst)?.data().iter().map(|x| x.to_bits()).collect());
        }
    }
    Ok(out)
}

fn compression() -> Outcome {
    let dir = tempfile::tempdir()?;
    let d = dir.path();
    let syn = d.join("syn");
    ned(&[
        "gen-corpus",
        "--out",
        s(&syn),
        "--entities",
        "100",
        "--sentences",
        "600",
        "--seed",
        "7",
    ])?;
    let (kb_dir, train_c, test_c) = (syn.join("kb"), syn.join("train.jsonl"), syn.join("test.jsonl"));
    let ck = d.join("ck");
    ned(&[
        "train",
        "--kb",
        s(&kb_dir),
        "--train",
        s(&train_c),
        "--out",
        s(&ck),
        "--max-steps",
        "30",
        "--lr",
        "1e-3",
        "--heads",
        "4",
    ])?;
    let model_path = ck.join("model.ckpt");
    let (full, small) = (d.join("k100.ckpt"), d.join("k5.ckpt"));
    let base = [
        "compress",
        "--checkpoint",
        s(&model_path),
        "--kb",
        s(&kb_dir),
        "--train",
        s(&train_c),
    ];
    ned(&[&base[..], &["--k-percent", "100", "--out", s(&full)]].concat())?;
    ned(&[&base[..], &["--k-percent", "5", "--out", s(&small)]].concat())?;

    let mut kb = load_kb(&KbPaths::in_dir(&kb_dir), &LoadOptions::default())?;
    kb.set_popularity(popularity_counts(&Corpus::load(&train_c)?, &kb)?);
    let test = Corpus::load(&test_c)?;
    let original: Model<f64> = load_checkpoint(&model_path)?;
    let same: Model<f64> = load_checkpoint(&full)?;
    let unchanged = predictions(&original, &test, &kb)? == predictions(&same, &test, &kb)?;

    let before = checkpoint_block(&fs::read(&model_path)?, "entity.table")?;
    let after = checkpoint_block(&fs::read(&small)?, "entity.table")?;
    let shrink = 1.0 - after.1 as f64 / before.1 as f64;
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("k5.ckpt.manifest.json"))?)?;
    let ratio = manifest["extra"]["ratio"].as_f64().context("manifest ratio")?;
    let ok =
        kb.len() == 100 && unchanged && after.0[0] == 6 && 100 * (before.1 - after.1) >= 94 * before.1 && ratio == 95.0;
    Ok((
        ok,
        format!(
            "k=100 predictions unchanged {unchanged}, k=5 rows {} of {}, entity block shrink {:.2}%, manifest ratio {ratio}",
            after.0[0],
            before.0[0],
            100.0 * shrink
        ),
    ))
}

// 9

fn determinism() -> Outcome {
    let dir = tempfile::tempdir()?;
    let d = dir.path();
    let syn = d.join("syn");
    ned(&[
        "gen-corpus",
        "--out",
        s(&syn),
        "--entities",
        "60",
        "--sentences",
        "400",
        "--seed",
        "11",
    ])?;
    let (kb_dir, train_c) = (syn.join("kb"), syn.join("train.jsonl"));
    for run in ["a", "b"] {
        ned(&[
            "train",
            "--kb",
            s(&kb_dir),
            "--train",
            s(&train_c),
            "--out",
            s(&d.join(run)),
            "--epochs",
            "2",
            "--lr",
            "1e-3",
            "--heads",
            "4",
        ])?;
    }
    let log = |run: &str| fs::read_to_string(d.join(run).join("train_log.tsv"));
    let curves_equal = log("a")? == log("b")?;
    let steps = log("a")?.lines().count() - 1;
    let ckpt = |run: &str| fs::read(d.join(run).join("model.ckpt"));
    let checkpoints_equal = ckpt("a")? == ckpt("b")?;

    let loaded: Model<f64> = load_checkpoint(&d.join("a").join("model.ckpt"))?;
    save_checkpoint(&loaded, &d.join("again.ckpt"))?;
    let resave_equal = fs::read(d.join("again.ckpt"))? == ckpt("a")?;

    // Retrain in process; the loaded copy must reproduce its predictions.
    let mut kb = load_kb(&KbPaths::in_dir(&kb_dir), &LoadOptions::default())?;
    let train_corpus = Corpus::load(&train_c)?;
    kb.set_popularity(popularity_counts(&train_corpus, &kb)?);
    let cfg = loaded.config.clone();
    let (trained, _) = train(&train_corpus, &kb, cfg, &TrainOptions::default())?;
    let same_as_cli = to_bytes(&trained) == ckpt("a")?;
    let test = Corpus::load(&syn.join("test.jsonl"))?;
    let predictions_equal = predictions(&trained, &test, &kb)? == predictions(&loaded, &test, &kb)?;
    let ok = curves_equal && checkpoints_equal && resave_equal && same_as_cli && predictions_equal;
    Ok((
        ok,
        format!(
            "{steps}-step loss curves identical {curves_equal}, checkpoints identical {checkpoints_equal}, \
             save-load-save identical {resave_equal}, library run matches CLI {same_as_cli}, predictions identical {predictions_equal}"
        ),
    ))
}

// 10

/// Row-major dense matrix for the reference forward pass.
#[derive(Clone, Debug)]
struct Mat {
    r: usize,
    c: usize,
    d: Vec<f64>,
}

impl Mat {
    fn zeros(r: usize, c: usize) -> Self {
        Self {
            r,
            c,
            d: vec![0.0; r * c],
        }
    }

    fn from_rows(rows: &[Vec<f64>]) -> Self {
        let c = rows.first().map_or(0, Vec::len);
        Self {
            r: rows.len(),
            c,
            d: rows.concat(),
        }
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.c + j]
    }

    fn row(&self, i: usize) -> Vec<f64> {
        self.d[i * self.c..(i + 1) * self.c].to_vec()
    }

    fn mm(&self, o: &Mat) -> Mat {
        assert_eq!(self.c, o.r);
        let mut out = Mat::zeros(self.r, o.c);
        for i in 0..self.r {
            for j in 0..o.c {
                let mut acc = 0.0;
                for t in 0..self.c {
                    acc += self.at(i, t) * o.at(t, j);
                }
                out.d[i * o.c + j] = acc;
            }
        }
        out
    }

    fn zip(&self, o: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
        assert_eq!((self.r, self.c), (o.r, o.c));
        Mat {
            r: self.r,
            c: self.c,
            d: self.d.iter().zip(&o.d).map(|(a, b)| f(*a, *b)).collect(),
        }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat {
            r: self.r,
            c: self.c,
            d: self.d.iter().map(|&a| f(a)).collect(),
        }
    }

    fn plus_row(&self, b: &[f64]) -> Mat {
        let mut out = self.clone();
        for i in 0..self.r {
            for j in 0..self.c {
                out.d[i * self.c + j] += b[j];
            }
        }
        out
    }
}

fn softmax(xs: &[f64], keep: &[bool]) -> Vec<f64> {
    let max = xs
        .iter()
        .zip(keep)
        .filter(|p| *p.1)
        .map(|p| *p.0)
        .fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = xs
        .iter()
        .zip(keep)
        .map(|(&x, &k)| if k { (x - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = ex.iter().sum();
    ex.iter().map(|e| e / total).collect()
}

fn pe(pos: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|j| {
            let angle = pos as f64 / 10000f64.powf((j - j % 2) as f64 / dim as f64);
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

struct Reference<'a> {
    p: BTreeMap<String, Mat>,
    cfg: &'a TrainConfig,
}

impl Reference<'_> {
    fn get(&self, name: &str) -> &Mat {
        self.p.get(name).unwrap_or_else(|| panic!("parameter {name}"))
    }

    fn vec(&self, name: &str) -> Vec<f64> {
        self.get(name).d.clone()
    }

    fn linear(&self, x: &Mat, name: &str, bias: bool) -> Mat {
        let y = x.mm(self.get(&format!("{name}.w")));
        if bias {
            y.plus_row(&self.vec(&format!("{name}.b")))
        } else {
            y
        }
    }

    fn mlp(&self, x: &Mat, name: &str) -> Mat {
        let h = self.linear(x, &format!("{name}.0"), true).map(|v| v.max(0.0));
        self.linear(&h, &format!("{name}.1"), true)
    }

    fn layer_norm(&self, x: &Mat, name: &str) -> Mat {
        let g = self.vec(&format!("{name}.gain"));
        let b = self.vec(&format!("{name}.bias"));
        let mut out = x.clone();
        for i in 0..x.r {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / x.c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.c as f64;
            for j in 0..x.c {
                out.d[i * x.c + j] = (row[j] - mean) / (var + 1e-5).sqrt() * g[j] + b[j];
            }
        }
        out
    }

    fn block(&self, name: &str, q_in: &Mat, kv: &Mat, keep: &[bool]) -> Mat {
        let q = self.linear(q_in, &format!("{name}.q"), true);
        let k = self.linear(kv, &format!("{name}.k"), true);
        let v = self.linear(kv, &format!("{name}.v"), true);
        let h = self.cfg.hidden;
        let dh = h / self.cfg.heads;
        let mut att = Mat::zeros(q.r, h);
        for head in 0..self.cfg.heads {
            let cols = head * dh..(head + 1) * dh;
            for i in 0..q.r {
                let logits: Vec<f64> = (0..k.r)
                    .map(|j| cols.clone().map(|t| q.at(i, t) * k.at(j, t)).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let w = softmax(&logits, keep);
                for t in cols.clone() {
                    att.d[i * h + t] = (0..k.r).map(|j| w[j] * v.at(j, t)).sum();
                }
            }
        }
        let a = self.linear(&att, &format!("{name}.o"), true);
        let x = self.layer_norm(&q_in.zip(&a, |p, q| p + q), &format!("{name}.ln1"));
        let f = self.linear(&x, &format!("{name}.ff1"), true).map(|v| v.max(0.0));
        let f = self.linear(&f, &format!("{name}.ff2"), true);
        self.layer_norm(&x.zip(&f, |p, q| p + q), &format!("{name}.ln2"))
    }

    fn add_attn(&self, name: &str, x: &Mat) -> Vec<f64> {
        let h = self.linear(x, &format!("{name}.proj"), true).map(f64::tanh);
        let s = h.mm(self.get(&format!("{name}.a")));
        let w = softmax(&s.d, &vec![true; x.r]);
        (0..x.c).map(|j| (0..x.r).map(|i| w[i] * x.at(i, j)).sum()).collect()
    }
}

struct FixtureMention {
    start: usize,
    end: usize,
    candidates: Vec<String>,
}

fn forward_oracle() -> Outcome {
    let dir = tempfile::tempdir()?;
    let d = dir.path();
    let aliases = [
        ("jordan", "jordan_river", 30),
        ("jordan", "michael_jordan", 50),
        ("jordan", "jordan_country", 20),
        ("bulls", "chicago_bulls", 40),
        ("bulls", "bulls_animal", 10),
    ];
    let types = [
        ("michael_jordan", 0),
        ("michael_jordan", 2),
        ("chicago_bulls", 1),
        ("jordan_river", 3),
        ("bulls_animal", 3),
    ];
    let relations = [
        ("michael_jordan", 0, "chicago_bulls"),
        ("jordan_country", 2, "jordan_river"),
        ("chicago_bulls", 1, "michael_jordan"),
        ("jordan_river", 2, "nowhere"),
    ];
    let coarse = [("michael_jordan", 1), ("chicago_bulls", 2), ("jordan_river", 0)];
    let cooc = [
        ("michael_jordan", "chicago_bulls", 1.5),
        ("jordan_river", "bulls_animal", 0.7),
    ];
    let tsv = |rows: Vec<String>| rows.concat();
    fs::write(
        d.join("aliases.tsv"),
        tsv(aliases.iter().map(|(a, e, p)| format!("{a}\t{e}\t{p}\n")).collect()),
    )?;
    fs::write(
        d.join("types.tsv"),
        tsv(types.iter().map(|(e, t)| format!("{e}\t{t}\n")).collect()),
    )?;
    fs::write(
        d.join("relations.tsv"),
        tsv(relations.iter().map(|(a, r, b)| format!("{a}\t{r}\t{b}\n")).collect()),
    )?;
    fs::write(
        d.join("coarse.tsv"),
        tsv(coarse.iter().map(|(e, c)| format!("{e}\t{c}\n")).collect()),
    )?;
    fs::write(
        d.join("cooc.adj.tsv"),
        tsv(cooc.iter().map(|(a, b, w)| format!("{a}\t{b}\t{w}\n")).collect()),
    )?;
    let cfg = TrainConfig {
        hidden: 8,
        heads: 2,
        ff_dim: 12,
        d_entity: 4,
        d_type: 4,
        d_relation: 6,
        d_coarse: 4,
        coarse_types: 3,
        encoder_layers: 1,
        layers: 2,
        ..TrainConfig::default()
    };
    let kb = load_kb(
        &KbPaths::in_dir(d),
        &LoadOptions {
            coarse_types: 3,
            ..LoadOptions::default()
        },
    )?;
    let mut sentence = Sentence::new(0, "Jordan scored for the Bulls in Chicago");
    sentence.mentions = vec![
        Mention::anchor(0, 1, "michael_jordan"),
        Mention::anchor(4, 5, "chicago_bulls"),
    ];
    let vocab = Vocab::build(&Corpus::new(vec![sentence.clone()]));
    let mut model: Model<f64> = Model::new(cfg.clone(), vocab, &kb)?;
    // Move every parameter off its structured initial value.
    let mut r = rng::stream(10, "acceptance.oracle");
    for id in model.params.ids().collect::<Vec<_>>() {
        for x in model.params.get_mut(id).data_mut() {
            *x += r.random_range(-0.3..0.3);
        }
    }
    let inst = model
        .prepare(&sentence, &kb, MentionFilter::All)?
        .context("no instance")?;
    let mask: Vec<bool> = (0..inst.slots.len()).map(|i| i % 2 == 1).collect();
    let mut worst = 0.0f64;
    let mut compared = 0;
    for entity_mask in [None, Some(&mask[..])] {
        let mut g = Graph::new();
        let b = model.params.bind(&mut g);
        let out = model.forward(&mut g, &b, &inst, entity_mask)?;
        let scores = g.value(out.scores).clone();
        let logits = g.value(out.type_logits.context("type head off")?).clone();
        let (ref_scores, ref_logits) = reference_forward(
            &model,
            &kb,
            &sentence,
            &cfg,
            &aliases,
            &types,
            &relations,
            &cooc,
            entity_mask,
        );
        ensure!(
            scores.shape() == [ref_scores.r, ref_scores.c],
            "score shape {:?}",
            scores.shape()
        );
        for (a, b) in scores
            .data()
            .iter()
            .zip(&ref_scores.d)
            .chain(logits.data().iter().zip(&ref_logits.d))
        {
            worst = worst.max((a - b).abs());
            compared += 1;
        }
    }
    Ok((
        worst <= 1e-10,
        format!("max elementwise difference {worst:.2e} over {compared} values"),
    ))
}

/// Independent evaluation-mode forward pass from the fixture tables and
/// the model's named parameters.
#[allow(clippy::too_many_arguments)]
fn reference_forward(
    model: &Model<f64>,
    kb: &StructuredKB,
    sentence: &Sentence,
    cfg: &TrainConfig,
    aliases: &[(&str, &str, u64)],
    types: &[(&str, u32)],
    relations: &[(&str, u32, &str)],
    cooc: &[(&str, &str, f64)],
    entity_mask: Option<&[bool]>,
) -> (Mat, Mat) {
    let p: BTreeMap<String, Mat> = model
        .params
        .ids()
        .map(|id| {
            let t = model.params.get(id);
            let (r, c) = match t.shape() {
                [] => (1, 1),
                [n] => (1, *n),
                [r, c] => (*r, *c),
                s => panic!("rank {}", s.len()),
            };
            (
                model.params.name(id).to_string(),
                Mat {
                    r,
                    c,
                    d: t.data().to_vec(),
                },
            )
        })
        .collect();
    let rf = Reference { p, cfg };
    let h = cfg.hidden;

    // Entities are indexed in sorted key order.
    let keys: BTreeSet<&str> = aliases.iter().map(|a| a.1).collect();
    let keys: Vec<&str> = keys.into_iter().collect();
    let index = |k: &str| keys.iter().position(|x| *x == k);
    let type_vocab = types.iter().map(|t| t.1 + 1).max().unwrap_or(0) as usize;
    let relation_vocab = relations.iter().map(|t| t.1 + 1).max().unwrap_or(0) as usize;

    let mentions: Vec<FixtureMention> = sentence
        .mentions
        .iter()
        .map(|m| {
            let text = sentence.tokens[m.start..m.end].join(" ");
            let mut c: Vec<(&str, u64)> = aliases.iter().filter(|a| a.0 == text).map(|a| (a.1, a.2)).collect();
            c.sort_by(|a, b| b.1.cmp(&a.1).then(index(a.0).cmp(&index(b.0))));
            FixtureMention {
                start: m.start,
                end: m.end,
                candidates: c.iter().take(cfg.candidates).map(|x| x.0.to_string()).collect(),
            }
        })
        .collect();
    let k = mentions.iter().map(|m| m.candidates.len()).max().unwrap_or(0);
    let n = mentions.len() * k;

    // Words.
    let token_table = rf.get("encoder.token");
    let word_rows: Vec<Vec<f64>> = sentence
        .tokens
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let e = token_table.row(model.vocab.id(t));
            e.iter().zip(pe(i, h)).map(|(a, b)| a + b).collect()
        })
        .collect();
    let mut words = Mat::from_rows(&word_rows);
    let all_words = vec![true; words.r];
    for l in 0..cfg.encoder_layers {
        words = rf.block(&format!("encoder.block{l}"), &words, &words, &all_words);
    }

    // Mention type head.
    let summed: Vec<Vec<f64>> = mentions
        .iter()
        .map(|m| {
            words
                .row(m.start)
                .iter()
                .zip(words.row(m.end - 1))
                .map(|(a, b)| a + b)
                .collect()
        })
        .collect();
    let type_logits = rf.mlp(&Mat::from_rows(&summed), "type.head");
    let probs: Vec<Vec<f64>> = (0..type_logits.r)
        .map(|i| softmax(&type_logits.row(i), &vec![true; type_logits.c]))
        .collect();
    let t_hat = Mat::from_rows(&probs).mm(rf.get("coarse.table"));

    // Candidate payloads in slot order.
    let mut payload_rows = Vec::new();
    let mut slot_of = vec![None; n];
    let mut slot_entity = vec![None; n];
    for (mi, m) in mentions.iter().enumerate() {
        for (c, key) in m.candidates.iter().enumerate() {
            let slot = payload_rows.len();
            let masked = entity_mask.is_some_and(|mk| mk[slot]);
            let u = if masked {
                vec![0.0; cfg.d_entity]
            } else {
                rf.get("entity.table").row(index(key).expect("entity"))
            };
            let mut t_ids: Vec<usize> = Vec::new();
            for &(e, t) in types {
                if e == key && !t_ids.contains(&(t as usize)) && t_ids.len() < cfg.max_types {
                    t_ids.push(t as usize);
                }
            }
            if t_ids.is_empty() {
                t_ids.push(type_vocab);
            }
            let mut r_ids: Vec<usize> = Vec::new();
            for &(e, r, _) in relations {
                if e == key && !r_ids.contains(&(r as usize)) && r_ids.len() < cfg.max_relations {
                    r_ids.push(r as usize);
                }
            }
            if r_ids.is_empty() {
                r_ids.push(relation_vocab);
            }
            let gather = |table: &str, ids: &[usize]| {
                Mat::from_rows(&ids.iter().map(|&i| rf.get(table).row(i)).collect::<Vec<_>>())
            };
            let t = rf.add_attn("type.attn", &gather("type.table", &t_ids));
            let r = rf.add_attn("relation.attn", &gather("relation.table", &r_ids));
            payload_rows.push([u, t, t_hat.row(mi), r].concat());
            slot_of[mi * k + c] = Some(slot);
            slot_entity[mi * k + c] = Some(key.as_str());
        }
    }
    let payload = rf.mlp(&Mat::from_rows(&payload_rows), "payload");
    let null = rf.vec("null_candidate");
    let pe_rows: Vec<Vec<f64>> = mentions
        .iter()
        .map(|m| [pe(m.start, h), pe(m.end - 1, h)].concat())
        .collect();
    let mention_pe = rf.linear(&Mat::from_rows(&pe_rows), "mention_pe", false);
    let e_rows: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let base = slot_of[i].map_or(null.clone(), |s| payload.row(s));
            base.iter().zip(mention_pe.row(i / k)).map(|(a, b)| a + b).collect()
        })
        .collect();
    let mut e = Mat::from_rows(&e_rows);
    let keep: Vec<bool> = slot_of.iter().map(Option::is_some).collect();

    // Adjacencies in name order; undirected, no within-mention pairs.
    let mut graphs: BTreeMap<&str, Vec<(&str, &str, f64)>> = BTreeMap::new();
    graphs.insert("cooc", cooc.to_vec());
    graphs.insert(
        "kg",
        relations
            .iter()
            .filter(|r| index(r.2).is_some())
            .map(|r| (r.0, r.2, 1.0))
            .collect(),
    );
    assert_eq!(
        kb.adjacency_names(),
        graphs.keys().map(|s| s.to_string()).collect::<Vec<_>>()
    );
    let adjs: Vec<(&str, Mat)> = graphs
        .iter()
        .map(|(name, edges)| {
            let mut a = Mat::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    if i / k == j / k {
                        continue;
                    }
                    if let (Some(x), Some(y)) = (slot_entity[i], slot_entity[j]) {
                        a.d[i * n + j] = edges
                            .iter()
                            .filter(|(p, q, _)| (*p == x && *q == y) || (*p == y && *q == x))
                            .map(|t| t.2)
                            .next_back()
                            .unwrap_or(0.0);
                    }
                }
            }
            (*name, a)
        })
        .collect();

    let v = rf.get("score.v");
    let mut scores = Mat::zeros(n, 1);
    for l in 0..cfg.layers {
        let ep = rf.block(&format!("layer{l}.phrase"), &e, &words, &all_words);
        let ec = rf.block(&format!("layer{l}.ent"), &e, &e, &keep);
        let e_prime = ep.zip(&ec, |a, b| a + b);
        let mut e_ks = Vec::new();
        for (name, a) in &adjs {
            let w = rf.get(&format!("layer{l}.kg.{name}.w")).d[0];
            let mut mix = Mat::zeros(n, n);
            for i in 0..n {
                let logits: Vec<f64> = (0..n).map(|j| a.at(i, j) + if i == j { w } else { 0.0 }).collect();
                let row = softmax(&logits, &keep);
                mix.d[i * n..(i + 1) * n].copy_from_slice(&row);
            }
            e_ks.push(mix.mm(&e_prime).zip(&e_prime, |x, y| x + y));
        }
        let mut sources = vec![e_prime.mm(v)];
        sources.extend(e_ks.iter().map(|ek| ek.mm(v)));
        scores = sources
            .iter()
            .skip(1)
            .fold(sources[0].clone(), |acc, s| acc.zip(s, f64::max));
        e = if e_ks.is_empty() {
            e_prime
        } else {
            let sum = e_ks
                .iter()
                .skip(1)
                .fold(e_ks[0].clone(), |acc, x| acc.zip(x, |a, b| a + b));
            sum.map(|x| x / e_ks.len() as f64)
        };
    }
    (
        Mat {
            r: mentions.len(),
            c: k,
            d: scores.d,
        },
        type_logits,
    )
}
