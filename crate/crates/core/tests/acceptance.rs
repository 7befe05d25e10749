//! End-to-end acceptance checks. Runs without the libtest harness so each
//! criterion prints exactly one PASS/FAIL line. Pass criterion numbers as
//! arguments to run a subset: `cargo test -p merl --test acceptance -- 1 6`.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use merl::alignment::{
    batch_objective, cma_loss, latent_dropout_views, uma_loss, DenominatorVariant, PretrainConfig, SimilarityMatrix,
    UmaMode,
};
use merl::ckepe::{assemble_prompt, parse_response, verify_against_kb, load_kb, KbKind, KnowledgeBase};
use merl::corpus::{count_non_finite, curate_pairs, generate_synthetic_corpus, plant_defects, Split, SyntheticCorpusSpec};
use merl::encoders::{AdapterRegistry, EcgBackbone, EncoderConfig, MerlModel};
use merl::harness::{
    default_prompts, encoder_for, evaluate_probe, evaluate_zeroshot, load_corpus, pretrain_model, run_experiment,
    ExperimentConfig, RawConfig, ResultRecord, TransferMap,
};
use merl::nn::Param;
use merl::zeroshot::{macro_auc, PromptStyle};

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn unit_rows(r: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    let mut m = Array2::from_shape_fn((n, d), |_| r.gen_range(-1.0..1.0));
    for mut row in m.rows_mut() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.mapv_inplace(|v| v / norm);
    }
    m
}

// ---- independent oracles ----

/// Bidirectional softmax cross-entropy, spelled out with plain loops.
fn naive_contrastive(s: &Array2<f64>, tau: f64, decoupled: bool) -> f64 {
    let l = s.nrows();
    let mut total = 0.0;
    for i in 0..l {
        let mut row_den = 0.0;
        let mut col_den = 0.0;
        for k in 0..l {
            if decoupled && k == i {
                continue;
            }
            row_den += (s[[i, k]] / tau).exp();
            col_den += (s[[k, i]] / tau).exp();
        }
        let pos = s[[i, i]] / tau;
        total += -(pos - row_den.ln()) - (pos - col_den.ln());
    }
    total / (2.0 * l as f64)
}

fn naive_normalize(v: &Array2<f64>) -> Array2<f64> {
    let mut out = v.clone();
    for mut row in out.rows_mut() {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        row.mapv_inplace(|x| x / n);
    }
    out
}

/// Fraction of (positive, negative) pairs ranked correctly, ties count half.
fn pairwise_auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let (mut wins, mut pairs) = (0.0, 0usize);
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1;
            wins += if si > sj {
                1.0
            } else if si == sj {
                0.5
            } else {
                0.0
            };
        }
    }
    (pairs > 0).then(|| wins / pairs as f64)
}

// ---- criteria ----

fn loss_oracle() -> Check {
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let mut r = rng(seed);
        let l = 2 + (seed as usize % 15);
        for d in [4, 32] {
            let tau = r.gen_range(0.05..1.0);
            let e = unit_rows(&mut r, l, d);
            let t = unit_rows(&mut r, l, d);
            let s = e.dot(&t.t());
            let sim = SimilarityMatrix::new(s.clone(), tau).map_err(|e| e.to_string())?;
            let z = Array2::from_shape_fn((l, d), |_| r.gen_range(-2.0..2.0));
            let views = latent_dropout_views(&z, 0.1, seed).map_err(|e| e.to_string())?;
            let vs = naive_normalize(&views.view1).dot(&naive_normalize(&views.view2).t());
            for (variant, decoupled) in [(DenominatorVariant::Standard, false), (DenominatorVariant::Decoupled, true)] {
                let cma = cma_loss(&sim, variant).map_err(|e| e.to_string())?;
                let uma = uma_loss(&views, tau, variant).map_err(|e| e.to_string())?;
                let dc = (cma - naive_contrastive(&s, tau, decoupled)).abs();
                let du = (uma - naive_contrastive(&vs, tau, decoupled)).abs();
                worst = worst.max(dc).max(du);
                ensure!(dc <= 1e-6 && du <= 1e-6, "seed {seed} L={l} d={d} {variant:?}: cma off by {dc:e}, uma off by {du:e}");
            }
        }
    }
    Ok(format!("max |diff| {worst:.2e} over 100 seeds x 2 dims x 2 variants (tol 1e-6)"))
}

fn closed_forms() -> Check {
    let uniform = SimilarityMatrix::new(Array2::from_elem((2, 2), 0.3), 1.0).map_err(|e| e.to_string())?;
    let a = cma_loss(&uniform, DenominatorVariant::Standard).map_err(|e| e.to_string())?;
    let diag = SimilarityMatrix::new(ndarray::array![[5.0, 0.0], [0.0, 5.0]], 1.0).map_err(|e| e.to_string())?;
    let b: f64 = cma_loss(&diag, DenominatorVariant::Decoupled).map_err(|e| e.to_string())?;
    ensure!((a - 2f64.ln()).abs() <= 1e-9, "uniform standard = {a}, want ln 2");
    ensure!((b + 5.0).abs() <= 1e-9, "decoupled diag = {b}, want -5");
    Ok(format!("uniform standard {a:.12} (ln 2), decoupled {b:.12} (tol 1e-9)"))
}

fn gradient_check() -> Check {
    let spec = SyntheticCorpusSpec {
        num_pairs: 8,
        num_leads: 3,
        num_samples: 128,
        seed: 4,
        ..SyntheticCorpusSpec::default()
    };
    let (_, pairs) = generate_synthetic_corpus(&spec).map_err(|e| e.to_string())?;
    let cfg = EncoderConfig {
        ecg_backbone: EcgBackbone::Resnet1d18,
        num_leads: 3,
        num_samples: 128,
        resnet_width: 4,
        ecg_embed_dim: 16,
        text_embed_dim: 24,
        shared_dim: 8,
        projector_hidden: 12,
        seed: 9,
        ..EncoderConfig::default()
    };
    let mut model: MerlModel<f64> = MerlModel::new(cfg, &AdapterRegistry::new()).map_err(|e| e.to_string())?;
    let pc = PretrainConfig {
        batch_size: 8,
        temperature: 0.2,
        uma: UmaMode::LatentDropout { ratio: 0.1 },
        ..PretrainConfig::default()
    };
    let signals: Vec<&Array2<f32>> = pairs.iter().map(|p| &p.ecg.signal).collect();
    let texts: Vec<&str> = pairs.iter().map(|p| p.report.text.as_str()).collect();
    let zr = model.encode_text(&texts).map_err(|e| e.to_string())?;

    // every scalar of both projectors, then 20 of them at random
    let mut slots: Vec<(String, usize)> = Vec::new();
    model.visit_all_params(&mut |name, p: &mut Param<f64>| {
        p.grad.fill(0.0);
        if name.contains("projector") {
            slots.extend((0..p.value.len()).map(|i| (name.to_string(), i)));
        }
    });
    let mut r = rng(77);
    let chosen: Vec<(String, usize)> = rand::seq::index::sample(&mut r, slots.len(), 20)
        .into_iter()
        .map(|i| slots[i].clone())
        .collect();
    batch_objective(&mut model, &signals, &zr, &pc, 5, true).map_err(|e| e.to_string())?;
    let mut analytic = Vec::new();
    for (name, idx) in &chosen {
        model.read_all_params(&mut |n, p| {
            if n == name {
                analytic.push(p.grad.iter().nth(*idx).copied().unwrap());
            }
        });
    }
    let h = 1e-5;
    let mut worst = 0.0f64;
    for ((name, idx), g) in chosen.iter().zip(analytic) {
        let shift = |model: &mut MerlModel<f64>, delta: f64| {
            model.visit_all_params(&mut |n, p| {
                if n == name {
                    *p.value.iter_mut().nth(*idx).unwrap() += delta;
                }
            });
        };
        shift(&mut model, h);
        let fp = batch_objective(&mut model, &signals, &zr, &pc, 5, false).map_err(|e| e.to_string())?.total;
        shift(&mut model, -2.0 * h);
        let fm = batch_objective(&mut model, &signals, &zr, &pc, 5, false).map_err(|e| e.to_string())?.total;
        shift(&mut model, h);
        let fd = (fp - fm) / (2.0 * h);
        let rel = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-6);
        worst = worst.max(rel);
        ensure!(rel <= 1e-3, "{name}[{idx}]: analytic {g:e} vs numeric {fd:e} (rel {rel:e})");
    }
    Ok(format!("20 projector parameters, max relative error {worst:.2e} (tol 1e-3)"))
}

fn dropout_semantics() -> Check {
    let mut r = rng(3);
    let z: Array2<f64> = Array2::from_shape_fn((1000, 1000), |_| r.gen_range(0.5..1.5));
    let v = latent_dropout_views(&z, 0.1, 11).map_err(|e| e.to_string())?;
    let frac = v.view1.iter().filter(|x| **x == 0.0).count() as f64 / 1e6;
    ensure!((frac - 0.1).abs() <= 0.003, "zero fraction {frac}");
    let again = latent_dropout_views(&z, 0.1, 11).map_err(|e| e.to_string())?;
    ensure!(again.mask1 == v.mask1 && again.mask2 == v.mask2, "masks differ under a fixed seed");
    ensure!(v.mask1 != v.mask2, "the two views share a mask");
    let keep = latent_dropout_views(&z, 0.0, 11).map_err(|e| e.to_string())?;
    let exact = keep.view1.iter().zip(z.iter()).all(|(a, b)| a.to_bits() == b.to_bits())
        && keep.view2.iter().zip(z.iter()).all(|(a, b)| a.to_bits() == b.to_bits());
    ensure!(exact, "p = 0 changed the input");
    Ok(format!("zero fraction {frac:.4} (0.1 +/- 0.003), p=0 bit-exact, masks reproducible"))
}

fn curation() -> Check {
    let spec = SyntheticCorpusSpec {
        num_pairs: 300,
        num_samples: 200,
        seed: 8,
        ..SyntheticCorpusSpec::default()
    };
    let (_, mut pairs) = generate_synthetic_corpus(&spec).map_err(|e| e.to_string())?;
    plant_defects(&mut pairs, 50, 10, 21);
    let planted: usize = pairs.iter().map(|p| count_non_finite(&p.ecg.signal)).sum();
    let short = pairs.iter().filter(|p| p.report.text.split_whitespace().count() < 3).count();
    ensure!(planted == 50 && short == 10, "planted {planted} non-finite values and {short} short reports");
    let n = pairs.len();
    let c = curate_pairs(pairs);
    let left: usize = c.kept.iter().map(|p| count_non_finite(&p.ecg.signal)).sum();
    let short_left = c.kept.iter().filter(|p| p.report.text.split_whitespace().count() < 3).count();
    ensure!(left == 0, "{left} non-finite values survived");
    ensure!(short_left == 0, "{short_left} short reports survived");
    let kept: BTreeSet<usize> = c.kept_indices.iter().copied().collect();
    let rejected: BTreeSet<usize> = c.rejected.iter().map(|r| r.index).collect();
    ensure!(kept.is_disjoint(&rejected), "a pair is both kept and rejected");
    ensure!(kept.len() + rejected.len() == n && kept.union(&rejected).count() == n, "kept and rejected do not cover the input");
    Ok(format!("{} kept, {} rejected of {n}; 0 non-finite, 0 short reports", kept.len(), rejected.len()))
}

fn auc_oracle() -> Check {
    let mut worst = 0.0f64;
    for inst in 0..50u64 {
        let mut r = rng(1000 + inst);
        let n = if inst == 0 { 2000 } else { r.gen_range(20..=2000) };
        let classes = r.gen_range(1..=5);
        // coarse grid so ties occur
        let scores = Array2::from_shape_fn((n, classes), |_| (r.gen_range(-3.0f64..3.0) * 20.0).round() / 20.0);
        let labels = Array2::from_shape_fn((n, classes), |_| u8::from(r.gen_bool(0.3)));
        let report = macro_auc(&scores, &labels).map_err(|e| e.to_string())?;
        let per: Vec<Option<f64>> = (0..classes)
            .map(|c| pairwise_auc(&scores.column(c).to_vec(), &labels.column(c).to_vec()))
            .collect();
        let defined: Vec<f64> = per.iter().flatten().copied().collect();
        let want = defined.iter().sum::<f64>() / defined.len() as f64;
        let diff = (report.macro_auc - want).abs();
        worst = worst.max(diff);
        ensure!(diff <= 1e-9, "instance {inst} (n={n}): {} vs oracle {want}", report.macro_auc);
        let bent = scores.mapv(|x| x * x * x + 2.0 * x + 7.0);
        let moved = (macro_auc(&bent, &labels).map_err(|e| e.to_string())?.macro_auc - report.macro_auc).abs();
        ensure!(moved <= 1e-12, "instance {inst}: monotone transform moved AUC by {moved:e}");
    }
    Ok(format!("50 instances up to n=2000, max |diff| {worst:.2e} (tol 1e-9), monotone-invariant"))
}

fn desk_config(overrides: &[(&str, &str)]) -> ExperimentConfig {
    let mut raw = RawConfig::defaults();
    let base = [
        ("synthetic.num_pairs", "2000"),
        ("synthetic.num_classes", "4"),
        ("encoder.backbone", "resnet1d_18"),
        ("encoder.resnet_width", "16"),
        ("encoder.ecg_embed_dim", "64"),
        ("encoder.text_embed_dim", "64"),
        ("encoder.shared_dim", "32"),
        ("encoder.projector_hidden", "64"),
        ("pretrain.epochs", "10"),
        ("pretrain.batch_size", "64"),
        ("pretrain.learning_rate", "1e-3"),
        ("pretrain.scale_lr_with_batch", "false"),
        ("zeroshot.style", "template"),
    ];
    for (k, v) in base.iter().chain(overrides) {
        raw.set(k, v).unwrap();
    }
    ExperimentConfig::from_raw(raw).unwrap()
}

fn end_to_end() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = desk_config(&[("probe.ratios", "1.0")]);
    let t = Instant::now();
    let corpus = load_corpus(&cfg).map_err(|e| e.to_string())?;
    let (model, _, _) = pretrain_model::<f32>(&cfg, &corpus, dir.path()).map_err(|e| e.to_string())?;
    let pretrain_secs = t.elapsed().as_secs_f64();
    let prompts = default_prompts(&corpus.manifest.label_vocabulary, PromptStyle::Template).map_err(|e| e.to_string())?;
    let (zs, _) = evaluate_zeroshot(&model, &corpus, &prompts, Split::Test).map_err(|e| e.to_string())?;
    let probe = evaluate_probe(&model, &corpus, &cfg.probe).map_err(|e| e.to_string())?;
    let random: MerlModel<f32> =
        MerlModel::new(encoder_for(&cfg, &corpus), &AdapterRegistry::new()).map_err(|e| e.to_string())?;
    let baseline = evaluate_probe(&random, &corpus, &cfg.probe).map_err(|e| e.to_string())?;
    let (a, b, c) = (zs.macro_auc, probe.auc.macro_auc, baseline.auc.macro_auc);
    let summary = format!(
        "zero-shot {a:.4} (>= 0.85), probe {b:.4} (>= 0.90), random-init probe {c:.4} (< probe), pretrain {pretrain_secs:.0}s, total {:.0}s",
        t.elapsed().as_secs_f64()
    );
    ensure!(a >= 0.85 && b >= 0.90 && c < b && t.elapsed().as_secs() < 600, "{summary}");
    Ok(summary)
}

fn ablation_direction() -> Check {
    let mut with_uma = Vec::new();
    let mut cma_only = Vec::new();
    for seed in [0u64, 1, 2] {
        for (uma, out) in [("latent_dropout", &mut with_uma), ("none", &mut cma_only)] {
            let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
            let seed_s = seed.to_string();
            let cfg = desk_config(&[
                ("experiment.seed", &seed_s),
                ("synthetic.num_pairs", "1200"),
                ("synthetic.num_samples", "500"),
                ("pretrain.epochs", "8"),
                ("pretrain.uma", uma),
                // instance-level UMA rewards encoding per-record nuisance, so
                // this run uses a milder corpus than the end-to-end check
                ("synthetic.variability", "0.7"),
            ]);
            let corpus = load_corpus(&cfg).map_err(|e| e.to_string())?;
            let (model, _, _) = pretrain_model::<f32>(&cfg, &corpus, dir.path()).map_err(|e| e.to_string())?;
            let prompts =
                default_prompts(&corpus.manifest.label_vocabulary, PromptStyle::Template).map_err(|e| e.to_string())?;
            let (zs, _) = evaluate_zeroshot(&model, &corpus, &prompts, Split::Test).map_err(|e| e.to_string())?;
            out.push(zs.macro_auc);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (u, c) = (mean(&with_uma), mean(&cma_only));
    let summary = format!(
        "mean zero-shot CMA+UMA {u:.4} vs CMA-only {c:.4} (need >= {:.4}); per seed {with_uma:.3?} vs {cma_only:.3?}",
        c - 0.02
    );
    ensure!(u >= c - 0.02, "{summary}");
    Ok(summary)
}

fn expected_maps() -> Vec<(&'static str, Vec<(&'static str, Vec<&'static str>)>, Vec<&'static str>)> {
    vec![
        (
            "ptbxl_super_to_cpsc2018",
            vec![
                ("HYP", vec![]),
                ("NORM", vec!["NORM"]),
                ("CD", vec!["1AVB", "CRBBB", "CLBBB"]),
                ("MI", vec![]),
                ("STTC", vec!["STE", "STD"]),
            ],
            vec!["AFIB", "PAC", "VPC"],
        ),
        (
            "ptbxl_super_to_csn",
            vec![
                ("HYP", vec!["RVH", "LVH"]),
                ("NORM", vec!["SR"]),
                ("CD", vec!["2AVB", "2AVB1", "1AVB", "AVB", "LBBB", "RBBB", "STDD"]),
                ("MI", vec!["MI"]),
                ("STTC", vec!["STTC", "STE", "TWO", "STTU", "QTIE", "TWC"]),
            ],
            vec!["WPW"],
        ),
        (
            "cpsc2018_to_csn",
            vec![
                ("AFIB", vec!["AFIB"]),
                ("VPC", vec!["VPB"]),
                ("NORM", vec!["SR"]),
                ("1AVB", vec!["1AVB"]),
                ("CRBBB", vec!["RBBB"]),
                ("STE", vec!["STE"]),
                ("PAC", vec!["APB"]),
                ("CLBBB", vec!["LBBB"]),
                ("STD", vec!["STE", "STTC", "STTU", "STDD"]),
            ],
            vec!["WPW"],
        ),
    ]
}

fn transfer_fidelity() -> Check {
    let mut fields = 0;
    for (name, rows, dropped) in expected_maps() {
        let map = TransferMap::builtin(name).map_err(|e| e.to_string())?;
        let from_file = TransferMap::load(&fixtures().join("transfer").join(format!("{name}.json"))).map_err(|e| e.to_string())?;
        ensure!(map == from_file, "{name}: embedded map differs from the fixture file");
        ensure!(map.mapping.len() == rows.len(), "{name}: {} rows, want {}", map.mapping.len(), rows.len());
        for (got, (source, targets)) in map.mapping.iter().zip(&rows) {
            ensure!(got.source == *source, "{name}: row source {} want {source}", got.source);
            ensure!(got.targets == *targets, "{name}/{source}: targets {:?} want {targets:?}", got.targets);
            fields += 1 + targets.len();
        }
        ensure!(map.dropped_target_categories == dropped, "{name}: dropped {:?}", map.dropped_target_categories);
    }
    Ok(format!("3 maps, {fields} fields equal to the published tables"))
}

fn ckepe_guarantee() -> Check {
    let dir = fixtures().join("ckepe");
    let web = load_kb(&dir.join("web_kb.json"), KbKind::WebSnomed).map_err(|e| e.to_string())?;
    let local = load_kb(&dir.join("local_kb.json"), KbKind::LocalScp).map_err(|e| e.to_string())?;
    let responses: std::collections::BTreeMap<String, String> =
        serde_json::from_str(&std::fs::read_to_string(dir.join("llm_responses.json")).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    let cands = parse_response("atrial fibrillation", &responses["atrial fibrillation"]).map_err(|e| e.to_string())?;
    let present = [
        "paroxysmal atrial fibrillation",
        "persistent atrial fibrillation",
        "irregular RR intervals",
        "absent P waves",
        "fibrillatory waves",
    ];
    let absent = ["quantum atrial fibrillation", "U-wave storm", "lightning baseline"];
    let web_only = &present[..3];
    let local_only = &present[3..];

    let run = |kbs: &[&KnowledgeBase]| {
        let v = assemble_prompt(verify_against_kb(&cands, kbs), PromptStyle::Ckepe);
        let kept = v.kept_subtypes.len() + v.kept_attributes.len();
        let discarded: BTreeSet<String> = v.discarded.iter().map(|d| d.term.to_lowercase()).collect();
        (v, kept, discarded)
    };
    let lower = |xs: &[&str]| xs.iter().map(|s| s.to_lowercase()).collect::<BTreeSet<_>>();

    let (v, kept, discarded) = run(&[&web, &local]);
    ensure!(kept == 5, "kept {kept} terms: {:?} {:?}", v.kept_subtypes, v.kept_attributes);
    ensure!(discarded == lower(&absent), "discarded {discarded:?}");
    let text = v.prompt_text.to_lowercase();
    for d in &discarded {
        ensure!(!text.contains(d.as_str()), "prompt {:?} contains discarded {d:?}", v.prompt_text);
    }

    let (_, kept_web, disc_web) = run(&[&web]);
    let want_web: BTreeSet<String> = lower(&absent).union(&lower(local_only)).cloned().collect();
    ensure!(kept_web == 3 && disc_web == want_web, "web only: kept {kept_web}, discarded {disc_web:?}");
    let (_, kept_local, disc_local) = run(&[&local]);
    let want_local: BTreeSet<String> = lower(&absent).union(&lower(web_only)).cloned().collect();
    ensure!(kept_local == 2 && disc_local == want_local, "local only: kept {kept_local}, discarded {disc_local:?}");
    Ok(format!("5 kept, 3 discarded, prompt {:?}; dropping a KB flips its 3/2 terms", v.prompt_text))
}

fn determinism() -> Check {
    let run = || -> Result<(String, Vec<ResultRecord>), String> {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let dir_s = dir.path().display().to_string();
        let cfg = desk_config(&[
            ("experiment.output_dir", &dir_s),
            ("synthetic.num_pairs", "240"),
            ("synthetic.num_samples", "400"),
            ("encoder.resnet_width", "8"),
            ("pretrain.epochs", "2"),
            ("pretrain.batch_size", "32"),
            ("probe.epochs", "10"),
        ]);
        let out = run_experiment(&cfg).map_err(|e| e.to_string())?;
        let log = std::fs::read_to_string(dir.path().join("train_log.jsonl")).map_err(|e| e.to_string())?;
        Ok((log, out.records))
    };
    let (log_a, rec_a) = run()?;
    let (log_b, rec_b) = run()?;
    ensure!(!log_a.is_empty() && log_a == log_b, "loss logs differ");
    let results = |recs: &[ResultRecord]| -> Vec<_> {
        recs.iter()
            .filter_map(|r| match r {
                ResultRecord::Result(e) => Some(e.clone()),
                ResultRecord::Failure { .. } => None,
            })
            .collect()
    };
    let (ra, rb) = (results(&rec_a), results(&rec_b));
    ensure!(ra.len() == rec_a.len() && ra.len() == 4, "expected 4 results, got {} of {}", ra.len(), rec_a.len());
    ensure!(ra == rb, "evaluation results differ between reruns");
    let prints: BTreeSet<&str> = ra.iter().map(|r| r.config_fingerprint.as_str()).collect();
    ensure!(prints.len() == ra.len(), "fingerprints collide across sub-tasks");
    Ok(format!("{} log lines and {} results (fingerprints included) identical across reruns", log_a.lines().count(), ra.len()))
}

fn main() {
    let criteria: [(u32, &str, fn() -> Check); 11] = [
        (1, "loss oracle equivalence", loss_oracle),
        (2, "closed-form losses", closed_forms),
        (3, "gradient correctness", gradient_check),
        (4, "dropout semantics", dropout_semantics),
        (5, "curation", curation),
        (6, "macro AUC oracle", auc_oracle),
        (7, "synthetic end-to-end", end_to_end),
        (8, "ablation direction", ablation_direction),
        (9, "transfer-map fidelity", transfer_fidelity),
        (10, "knowledge-verified prompts", ckepe_guarantee),
        (11, "determinism", determinism),
    ];
    let wanted: BTreeSet<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, check) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n:>2} {name}: PASS ({detail}) [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:>2} {name}: FAIL ({detail}) [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
