//! One PASS/FAIL line per acceptance criterion, each under its runtime budget.
//!
//! Run with `cargo test -p vprune-cli --test acceptance -- --nocapture` to
//! see the lines.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vprune_core::corpus::count_token_frequencies;
use vprune_core::distill::{
    argmax, kd_loss, kd_loss_grad, student_forward, train_student, DistillConfig, Encoder,
    LossOrder, StudentModel,
};
use vprune_core::matrix::{load_embeddings, save_embeddings, EmbeddingMatrix};
use vprune_core::pca::{embedding_to_matrix, fit_pca, load_pca, PcaModel};
use vprune_core::prune::{build_remap, load_remap, select_top_k, PrunedVocabulary, RemapArtifact};
use vprune_core::report::{compression_report, count_params, ModelConfig};
use vprune_core::synthetic::{
    gaussian_embeddings, linear_intent_task, random_corpus, word_vocab, LINEAR_TASK_LABELS,
};

type Check = Result<(), String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Check {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn run(id: u32, name: &str, budget: Option<Duration>, f: fn() -> Check) -> bool {
    let start = Instant::now();
    let mut outcome = f();
    let took = start.elapsed();
    if let (Ok(()), Some(b)) = (&outcome, budget) {
        if took > b {
            outcome = Err(format!("took {took:.2?}, budget {b:.0?}"));
        }
    }
    match &outcome {
        Ok(()) => println!("criterion {id} PASS {name} ({took:.2?})"),
        Err(e) => println!("criterion {id} FAIL {name}: {e}"),
    }
    outcome.is_ok()
}

fn accounting() -> Check {
    let before = count_params(&ModelConfig::bert_base()).map_err(|e| e.to_string())?;
    let after = count_params(&ModelConfig::bert_base_compressed()).map_err(|e| e.to_string())?;
    let r = compression_report(&before, &after).map_err(|e| e.to_string())?;
    let vocab_pct = r.vocabulary_pct();
    ensure((vocab_pct - 3.41).abs() <= 0.1, || {
        format!("vocabulary kept {vocab_pct}%")
    })?;
    let vocab_shrink = r.vocabulary_shrink().unwrap_or(f64::NAN);
    ensure((vocab_shrink - 29.3).abs() <= 1.0, || {
        format!("vocabulary shrink {vocab_shrink}")
    })?;
    let total = r.total_after() as f64;
    ensure((total - 5.1e6).abs() <= 0.5e6, || {
        format!("total after {total}")
    })?;
    let total_shrink = r.total_shrink().unwrap_or(f64::NAN);
    ensure((total_shrink - 21.0).abs() <= 1.0, || {
        format!("total shrink {total_shrink}")
    })?;
    ensure(r.to_json().contains("3.41"), || "json lacks 3.41".into())
}

/// Double loop over every (token, kept) pair; kept tokens are fixed points,
/// everything else takes the nearest kept row and then the smallest id.
fn brute_force_remap(emb: &EmbeddingMatrix, pruned: &PrunedVocabulary) -> Vec<u32> {
    let kept = pruned.kept();
    (0..emb.rows())
        .map(|t| {
            if let Some(pos) = kept.iter().position(|(id, _)| *id as usize == t) {
                return pos as u32;
            }
            let mut best: Option<(f64, u32, usize)> = None;
            for (pos, (id, _)) in kept.iter().enumerate() {
                let d: f64 = emb
                    .row(t)
                    .iter()
                    .zip(emb.row(*id as usize))
                    .map(|(a, b)| (f64::from(*a) - f64::from(*b)).powi(2))
                    .sum();
                if best.is_none_or(|(bd, bid, _)| d < bd || (d == bd && *id < bid)) {
                    best = Some((d, *id, pos));
                }
            }
            best.unwrap().2 as u32
        })
        .collect()
}

fn remap_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..50 {
        let n_words = rng.gen_range(5..=996);
        let vocab = word_vocab(n_words);
        let dim = rng.gen_range(1..=32);
        let rows = vocab.len();
        let ties = case % 2 == 0;
        let data: Vec<f32> = (0..rows * dim)
            .map(|_| {
                if ties {
                    rng.gen_range(-2i32..=2) as f32
                } else {
                    rng.gen_range(-1.0f32..1.0)
                }
            })
            .collect();
        let emb = EmbeddingMatrix::new(rows, dim, data).map_err(|e| e.to_string())?;
        let corpus = random_corpus(rng.gen(), n_words, rng.gen_range(1..200));
        let freq = count_token_frequencies(&corpus, &vocab);
        let pruned =
            select_top_k(&freq, &vocab, rng.gen_range(1..=n_words)).map_err(|e| e.to_string())?;
        let table = build_remap(&vocab, &pruned, &emb).map_err(|e| e.to_string())?;
        ensure(
            table.map() == brute_force_remap(&emb, &pruned).as_slice(),
            || format!("instance {case} (|V|={rows}, D={dim}) differs from oracle"),
        )?;
    }
    Ok(())
}

fn kd_correctness() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let h = 1e-4;
    for order in [LossOrder::TeacherRef, LossOrder::StudentRef] {
        for case in 0..100 {
            let c = rng.gen_range(2..=10);
            let cfg = DistillConfig {
                temperature: [0.5, 1.0, 2.0, 10.0][rng.gen_range(0..4)],
                loss_order: order,
                ..Default::default()
            };
            let s: Vec<f64> = (0..c).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let t: Vec<f64> = (0..c).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let analytic = kd_loss_grad(&s, &t, &cfg);
            let numeric: Vec<f64> = (0..c)
                .map(|i| {
                    let (mut p, mut m) = (s.clone(), s.clone());
                    p[i] += h;
                    m[i] -= h;
                    (kd_loss(&p, &t, &cfg) - kd_loss(&m, &t, &cfg)) / (2.0 * h)
                })
                .collect();
            let diff = analytic
                .iter()
                .zip(&numeric)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            let scale = numeric.iter().map(|b| b * b).sum::<f64>().sqrt().max(1e-8);
            ensure(diff / scale < 1e-4, || {
                format!("{order:?} case {case}: relative error {}", diff / scale)
            })?;

            for temp in [0.5, 1.0, 10.0] {
                let same = kd_loss(
                    &t,
                    &t,
                    &DistillConfig {
                        temperature: temp,
                        ..cfg.clone()
                    },
                );
                ensure(same.abs() <= 1e-12, || format!("kd(x, x, {temp}) = {same}"))?;
            }
            let shift = rng.gen_range(-50.0..50.0);
            let s2: Vec<f64> = s.iter().map(|v| v + shift).collect();
            let t2: Vec<f64> = t.iter().map(|v| v - shift).collect();
            let delta = (kd_loss(&s2, &t2, &cfg) - kd_loss(&s, &t, &cfg)).abs();
            ensure(delta <= 1e-9, || {
                format!("shift {shift} moved loss by {delta}")
            })?;
        }
    }
    Ok(())
}

/// Cyclic Jacobi eigenvalues of a symmetric matrix, sorted descending.
#[allow(clippy::needless_range_loop)]
fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|(i, j)| i != j)
            .map(|(i, j)| a[i][j].powi(2))
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = if theta == 0.0 {
                    1.0
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for row in a.iter_mut() {
                    let (kp, kq) = (row[p], row[q]);
                    row[p] = c * kp - s * kq;
                    row[q] = s * kp + c * kq;
                }
                for k in 0..n {
                    let (pk, qk) = (a[p][k], a[q][k]);
                    a[p][k] = c * pk - s * qk;
                    a[q][k] = s * pk + c * qk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

fn scatter(data: &DMatrix<f64>) -> Vec<Vec<f64>> {
    let (n, d) = data.shape();
    let mean: Vec<f64> = (0..d).map(|j| data.column(j).sum() / n as f64).collect();
    (0..d)
        .map(|a| {
            (0..d)
                .map(|b| {
                    (0..n)
                        .map(|i| (data[(i, a)] - mean[a]) * (data[(i, b)] - mean[b]))
                        .sum()
                })
                .collect()
        })
        .collect()
}

fn random_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, d, |_, j| {
        rng.gen_range(-1.0..1.0) / (1.0 + j as f64 * 0.3) + 0.5
    })
}

fn round_trip(model: &PcaModel, data: &DMatrix<f64>) -> Result<DMatrix<f64>, String> {
    let low = model.project(data).map_err(|e| e.to_string())?;
    model.reconstruct(&low).map_err(|e| e.to_string())
}

fn pca_properties() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10 {
        let (n, d) = (rng.gen_range(10..=150), rng.gen_range(2..=48));
        let data = random_matrix(&mut rng, n, d);
        let k = rng.gen_range(1..d.min(n));
        let model = fit_pca(&data, k).map_err(|e| e.to_string())?;
        let once = round_trip(&model, &data)?;
        let twice = round_trip(&model, &once)?;
        ensure((&twice - &once).amax() < 1e-5, || {
            format!("not idempotent at n={n} d={d} k={k}")
        })?;

        // squared error equals the scatter eigenvalues left out
        let err: f64 = (&once - &data).iter().map(|v| v * v).sum();
        let discarded: f64 = jacobi_eigenvalues(scatter(&data))[k..]
            .iter()
            .map(|v| v.max(0.0))
            .sum();
        let rel = (err - discarded).abs() / discarded;
        ensure(rel < 1e-4, || {
            format!("discarded-eigenvalue identity off by {rel} at n={n} d={d} k={k}")
        })?;
    }
    for _ in 0..10 {
        let (n, d) = (rng.gen_range(20..150), rng.gen_range(4..48));
        let k = rng.gen_range(1..d.min(6));
        let coeff = DMatrix::from_fn(n, k, |_, _| rng.gen_range(-2.0..2.0));
        let basis = DMatrix::from_fn(k, d, |_, _| rng.gen_range(-1.0..1.0));
        let offset: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let data = DMatrix::from_fn(n, d, |i, j| {
            (coeff.row(i) * basis.column(j))[(0, 0)] + offset[j]
        });
        let model = fit_pca(&data, k).map_err(|e| e.to_string())?;
        let max = (round_trip(&model, &data)? - &data).amax();
        ensure(max < 1e-5, || {
            format!("rank-{k} data recovered with error {max}")
        })?;
    }
    let data = random_matrix(&mut rng, 120, 24);
    let mut prev = f64::INFINITY;
    for k in 1..=24 {
        let model = fit_pca(&data, k).map_err(|e| e.to_string())?;
        let err: f64 = (round_trip(&model, &data)? - &data)
            .iter()
            .map(|v| v * v)
            .sum();
        ensure(err <= prev + 1e-9, || format!("error rose at d'={k}"))?;
        prev = err;
    }
    Ok(())
}

fn distillation() -> Check {
    let task = linear_intent_task(42, 40, 8, 200, 200);
    let freq = count_token_frequencies(&task.train, &task.vocab);
    let pruned = select_top_k(&freq, &task.vocab, 2000).map_err(|e| e.to_string())?;
    let remap = build_remap(&task.vocab, &pruned, &task.embeddings).map_err(|e| e.to_string())?;
    let kept = embedding_to_matrix(
        &pruned
            .gather_rows(&task.embeddings)
            .map_err(|e| e.to_string())?,
    );
    let pca = fit_pca(&kept, 8).map_err(|e| e.to_string())?;
    let low = pca.project(&kept).map_err(|e| e.to_string())?;
    let labels = LINEAR_TASK_LABELS.iter().map(|s| s.to_string()).collect();
    let init = StudentModel::from_compressed(labels, &low, &pca).map_err(|e| e.to_string())?;
    let enc = Encoder::new(&task.vocab, &remap);
    let cfg = DistillConfig::default();
    let train = || {
        train_student(&task.train, &task.teacher_train, &enc, init.clone(), &cfg)
            .map_err(|e| e.to_string())
    };
    let a = train()?.model;
    let mut hits = 0;
    for (i, u) in task.test.utterances().iter().enumerate() {
        let seq = enc.encode(&u.text).map_err(|e| e.to_string())?;
        let z = student_forward(&a, &seq).map_err(|e| e.to_string())?;
        hits += usize::from(argmax(&z) == argmax(&task.teacher_test.row(i)));
    }
    let agree = hits as f64 / task.test.len() as f64;
    ensure(agree >= 0.95, || format!("agreement {agree}"))?;
    let b = train()?.model;
    let bits = |m: &StudentModel| {
        m.weights()
            .iter()
            .chain(m.bias().iter())
            .map(|v| v.to_bits())
            .collect::<Vec<_>>()
    };
    ensure(bits(&a) == bits(&b), || "rerun differs".into())
}

fn parallel_determinism() -> Check {
    let vocab = word_vocab(900);
    let emb = gaussian_embeddings(vocab.len(), 16, &mut ChaCha8Rng::seed_from_u64(6));
    let corpus = random_corpus(7, 900, 10_000);
    let mut outputs = Vec::new();
    for threads in [1, 2, 8] {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| e.to_string())?;
        outputs.push(pool.install(|| {
            let freq = count_token_frequencies(&corpus, &vocab);
            let pruned = select_top_k(&freq, &vocab, 300).map_err(|e| e.to_string())?;
            let remap = build_remap(&vocab, &pruned, &emb).map_err(|e| e.to_string())?;
            Ok::<_, String>((freq, remap))
        })?);
    }
    ensure(outputs.windows(2).all(|w| w[0] == w[1]), || {
        "outputs differ across thread counts".into()
    })
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| e.to_string())? {
        let entry = entry.map_err(|e| e.to_string())?;
        let bytes = std::fs::read(entry.path()).map_err(|e| e.to_string())?;
        files.push((entry.file_name().to_string_lossy().into_owned(), bytes));
    }
    files.sort();
    Ok(files)
}

fn round_trips() -> Check {
    let err = |e: vprune_core::Error| e.to_string();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path();

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut data: Vec<f32> = (0..60 * 7).map(|_| rng.gen_range(-1e3f32..1e3)).collect();
    data[..4].copy_from_slice(&[0.0, -0.0, f32::MIN_POSITIVE, f32::MAX]);
    let m = EmbeddingMatrix::new(60, 7, data).map_err(err)?;
    save_embeddings(&m, root.join("m.vpem")).map_err(err)?;
    let back = load_embeddings(root.join("m.vpem")).map_err(err)?;
    let bits = |m: &EmbeddingMatrix| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    ensure(bits(&back) == bits(&m) && back.dim() == 7, || {
        "VPEM reload differs".into()
    })?;

    let task = linear_intent_task(9, 30, 6, 80, 10);
    let freq = count_token_frequencies(&task.train, &task.vocab);
    let pruned = select_top_k(&freq, &task.vocab, 12).map_err(err)?;
    let remap = build_remap(&task.vocab, &pruned, &task.embeddings).map_err(err)?;
    std::fs::write(
        root.join("remap.json"),
        RemapArtifact::new(&pruned, &remap).to_json(),
    )
    .map_err(|e| e.to_string())?;
    let (p2, r2) = load_remap(root.join("remap.json"), &task.vocab).map_err(err)?;
    ensure(p2 == pruned && r2 == remap, || {
        "remap JSON reload differs".into()
    })?;

    let kept = embedding_to_matrix(&pruned.gather_rows(&task.embeddings).map_err(err)?);
    let model = fit_pca(&kept, 4).map_err(err)?;
    let pca_dir = root.join("pca");
    std::fs::create_dir(&pca_dir).map_err(|e| e.to_string())?;
    save_embeddings(
        &model.mean_matrix().map_err(err)?,
        pca_dir.join(vprune_core::pca::MEAN_FILE),
    )
    .map_err(err)?;
    save_embeddings(
        &model.components_matrix().map_err(err)?,
        pca_dir.join(vprune_core::pca::COMPONENTS_FILE),
    )
    .map_err(err)?;
    std::fs::write(
        pca_dir.join(vprune_core::pca::SIDECAR_FILE),
        serde_json::to_string(&model.sidecar()).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    ensure(load_pca(&pca_dir).map_err(err)? == model, || {
        "PCA artifacts reload differs".into()
    })?;

    // the CLI writes the same bytes when run twice
    let vocab_path = root.join("vocab.txt");
    std::fs::write(&vocab_path, task.vocab.tokens().join("\n")).map_err(|e| e.to_string())?;
    save_embeddings(&task.embeddings, root.join("emb.vpem")).map_err(err)?;
    std::fs::write(root.join("train.jsonl"), task.train.to_jsonl()).map_err(|e| e.to_string())?;
    let mut snapshots = Vec::new();
    for _ in 0..2 {
        let out_dir = root.join("pruned");
        let status = Command::new(env!("CARGO_BIN_EXE_vprune"))
            .arg("prune")
            .arg("--vocab")
            .arg(&vocab_path)
            .arg("--embeddings")
            .arg(root.join("emb.vpem"))
            .arg("--corpus")
            .arg(root.join("train.jsonl"))
            .args(["--k", "12", "--pca-dim", "4", "--out-dir"])
            .arg(&out_dir)
            .status()
            .map_err(|e| e.to_string())?;
        ensure(status.success(), || format!("prune exited with {status}"))?;
        snapshots.push(read_dir_sorted(&out_dir)?);
    }
    ensure(snapshots[0] == snapshots[1], || {
        "CLI rerun artifacts differ".into()
    })?;
    ensure(snapshots[0].len() == 6, || {
        format!("expected 6 artifacts, found {}", snapshots[0].len())
    })
}

#[test]
fn acceptance() {
    let secs = Duration::from_secs;
    let results = [
        run(1, "parameter accounting", Some(secs(1)), accounting),
        run(
            2,
            "remap equals brute-force oracle",
            Some(secs(10)),
            remap_oracle,
        ),
        run(
            3,
            "distillation loss and gradient",
            Some(secs(5)),
            kd_correctness,
        ),
        run(4, "PCA properties", Some(secs(10)), pca_properties),
        run(5, "end-to-end distillation", Some(secs(30)), distillation),
        run(
            6,
            "determinism across thread counts",
            None,
            parallel_determinism,
        ),
        run(7, "format round-trips", None, round_trips),
    ];
    let passed = results.iter().filter(|ok| **ok).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    assert_eq!(passed, results.len());
}
