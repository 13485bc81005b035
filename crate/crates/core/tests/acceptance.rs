//! Acceptance suite: one PASS / FAIL / SKIP line per criterion.
//!
//! Criteria 5 to 7 compare trained models on the default synthetic catalog
//! and are reported without failing the run; every other criterion is a
//! correctness check and fails the run when it does not hold.

mod common;

use std::path::{Path, PathBuf};
use std::time::Instant;

use blockscl::cli::{cmd_ablate, cmd_stats, RunConfig};
use blockscl::data::assign_ids;
use blockscl::encoder::{featurize_title, ContrastiveModel, EncoderConfig, ProjectionConfig};
use blockscl::experiment::{run_pipeline, AblationRow};
use blockscl::loss::scl_loss;
use blockscl::matching::Classifier;
use blockscl::numerics::{grad_check, ParamStore, Parameter, Tape, Tensor};
use blockscl::sampler::{epoch_plan, next_batch, SamplerConfig, SamplerIndex};
use blockscl::train::{finetune, lr_at, warmup_steps, AdamWConfig, OptimizerState, TrainConfig};
use common::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

struct Report {
    hard_failures: Vec<usize>,
}

impl Report {
    fn record(&mut self, id: usize, name: &str, hard: bool, started: Instant, v: Verdict) {
        let secs = started.elapsed().as_secs_f64();
        let (tag, detail) = match v {
            Verdict::Pass(d) => ("PASS", d),
            Verdict::Fail(d) => {
                if hard {
                    self.hard_failures.push(id);
                }
                ("FAIL", d)
            }
            Verdict::Skip(d) => ("SKIP", d),
        };
        println!("{tag} {id:>2} {name}: {detail} [{secs:.1}s]");
    }
}

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

const WORDS: &[&str] = &[
    "kingston", "sandisk", "32gb", "64gb", "usb", "3.0", "black", "red", "ultra", "flash", "drive", "pro", "x200",
];

fn random_title(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(1..5);
    (0..n).map(|_| *WORDS.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

fn gradient_correctness() -> Verdict {
    let mut worst_chain: f64 = 0.0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = EncoderConfig {
            feature_vocab_size: 128,
            embed_dim: 8,
            ngram_min: 3,
            ngram_max: 4,
            use_word_features: true,
            seed,
        };
        let p = ProjectionConfig {
            hidden_dim: 10,
            out_dim: 6,
            dropout_p: 0.1,
        };
        let model = ContrastiveModel::<f64>::new(e, p).unwrap();
        let b = rng.gen_range(3..7);
        let mut ids: Vec<usize> = (0..b).map(|_| rng.gen_range(0..3)).collect();
        ids[1] = ids[0];
        let bags: Vec<Vec<u32>> = (0..b).map(|_| featurize_title(&random_title(&mut rng), &e).unwrap()).collect();
        let tau = rng.gen_range(0.07..1.0);
        let eval = |flat: &[f64]| {
            let mut m = model.clone();
            m.params.assign_flat(flat).unwrap();
            m.params.zero_grad();
            let mut tape = Tape::new();
            let z = m.forward(&mut tape, bags.clone(), true, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let out = scl_loss(tape.value(z), &ids, tau).unwrap();
            tape.backward(z, out.grad, &mut m.params).unwrap();
            (out.loss, m.params.flatten_grad())
        };
        let r = grad_check(eval, &model.params.flatten(), 1e-5).unwrap();
        worst_chain = worst_chain.max(r.max_rel_err);
    }

    // affine and mean-pooling ops alone, against a random linear read-out
    let mut worst_linear: f64 = 0.0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let (rows, n, m, vocab) = (rng.gen_range(1..5), rng.gen_range(1..6), rng.gen_range(1..6), 16);
        let mut u = |len: usize| -> Vec<f64> { (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect() };
        let (w0, b0, t0) = (u(n * m), u(m), u(vocab * n));
        let read_out = u(rows * m);
        let bags: Vec<Vec<u32>> = (0..rows)
            .map(|i| (0..1 + i).map(|j| ((i * 7 + j * 3) % vocab) as u32).collect())
            .collect();
        let eval = |flat: &[f64]| {
            let mut ps = ParamStore::new();
            let t = ps.add(Parameter::new("t", Tensor::from_vec(&[vocab, n], flat[..vocab * n].to_vec()).unwrap()));
            let w = ps.add(Parameter::new("w", Tensor::from_vec(&[n, m], flat[vocab * n..vocab * n + n * m].to_vec()).unwrap()));
            let b = ps.add(Parameter::new("b", Tensor::from_vec(&[m], flat[vocab * n + n * m..].to_vec()).unwrap()));
            let mut tape = Tape::new();
            let x = tape.embed_mean(t, bags.clone(), &ps).unwrap();
            let y = tape.affine(x, w, b, &ps).unwrap();
            let value: f64 = tape.value(y).data().iter().zip(&read_out).map(|(a, c)| a * c).sum();
            tape.backward(y, Tensor::from_vec(&[rows, m], read_out.clone()).unwrap(), &mut ps).unwrap();
            (value, ps.flatten_grad())
        };
        let point: Vec<f64> = t0.iter().chain(&w0).chain(&b0).copied().collect();
        worst_linear = worst_linear.max(grad_check(eval, &point, 1e-5).unwrap().max_rel_err);
    }
    verdict(
        worst_chain < 1e-4 && worst_linear < 1e-6,
        format!("composed chain max rel err {worst_chain:.2e} over 100 seeds; embedding mean + affine {worst_linear:.2e}"),
    )
}

fn loss_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let b = rng.gen_range(2..=16);
        let d = rng.gen_range(1..=8);
        let z = unit_rows(b, d, &mut rng);
        let mut ids: Vec<usize> = (0..b).map(|_| rng.gen_range(0..b.div_ceil(2))).collect();
        ids[1] = ids[0];
        let tau = rng.gen_range(0.05..1.0);
        let fast = scl_loss(&z, &ids, tau).unwrap().loss;
        worst = worst.max((fast - naive_scl(&z, &ids, tau)).abs());
    }
    let pair: f64 = scl_loss(&Tensor::from_rows(&[vec![0.6, 0.8], vec![1.0, 0.0]]).unwrap(), &[4, 4], 0.07).unwrap().loss;
    let same: f64 = scl_loss(&Tensor::from_rows(&vec![vec![0.0, 1.0]; 4]).unwrap(), &[0; 4], 0.07).unwrap().loss;
    let closed = pair.abs().max((same - 3f64.ln()).abs());
    verdict(
        worst < 1e-9 && closed < 1e-9,
        format!("max |stable - naive| {worst:.1e} on 1000 batches; closed forms off by {closed:.1e}"),
    )
}

fn graph_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut bad = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(2..=200);
        let m = rng.gen_range(1..=2 * n);
        let p = rng.gen_range(0.1..0.9);
        let pairs = random_pairs(&mut rng, n, m, p);
        let c = assign_ids(&pairs).unwrap();
        let (prod, block) = (catalog_partition(&c, true), catalog_partition(&c, false));
        if prod != closure_partition(&pairs, true) || block != closure_partition(&pairs, false) || !refines(&prod, &block) {
            bad += 1;
        }
    }
    verdict(bad == 0, format!("{bad} of 1000 random pair sets disagree with the closure oracle"))
}

fn sampler_invariants() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut batches = 0;
    let mut errors = Vec::new();
    while batches < 10_000 {
        let (n, m) = (rng.gen_range(4..80), rng.gen_range(4..160));
        let pairs = random_pairs(&mut rng, n, m, 0.5);
        let catalog = assign_ids(&pairs).unwrap();
        let Ok(index) = SamplerIndex::build(&catalog) else { continue };
        let k = rng.gen_range(1..5);
        let q = rng.gen_range(0..20);
        let cfg = SamplerConfig {
            k,
            q,
            target_batch_size: k + 1 + q + rng.gen_range(0..40),
            blocking_mode: rng.gen_bool(0.7),
            seed: rng.gen(),
        };
        let seed: u64 = rng.gen();
        let plan = epoch_plan(&index, &cfg, seed).unwrap();
        if plan != epoch_plan(&index, &cfg, seed).unwrap() {
            errors.push("epoch plan not reproducible".to_string());
        }
        let single = next_batch(&index, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        if single != next_batch(&index, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap() {
            errors.push("batch not reproducible".to_string());
        }
        for b in plan.iter().chain(std::iter::once(&single)) {
            batches += 1;
            if let Err(e) = check_batch(b, &catalog, &cfg) {
                errors.push(e);
            }
        }
    }
    verdict(
        errors.is_empty(),
        format!("{batches} batches, {} violations{}", errors.len(), errors.first().map(|e| format!(" (first: {e})")).unwrap_or_default()),
    )
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn sweep_config(out: &Path) -> RunConfig {
    RunConfig::load(
        Some(&repo_root().join("configs/ablation.toml")),
        &[format!("out_dir = \"{}\"", out.display())],
    )
    .unwrap()
}

fn row(rows: &[AblationRow], blocking: bool, k: usize, q: usize) -> Option<&AblationRow> {
    rows.iter().find(|r| r.blocking == blocking && r.k == k && (!blocking || r.q == q) && r.error.is_none())
}

fn fmt_means(rows: &[Option<&AblationRow>]) -> String {
    rows.iter()
        .map(|r| r.map(|r| format!("{:.2}", r.f1_mean)).unwrap_or("n/a".into()))
        .collect::<Vec<_>>()
        .join(", ")
}

fn matcher_symmetry_and_freeze() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut asym = 0;
    for i in 0..10_000u64 {
        let d = rng.gen_range(1..33);
        let clf = Classifier::<f32>::new(d, i);
        let a: Vec<f32> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let b: Vec<f32> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        if clf.predict(&a, &b).unwrap().to_bits() != clf.predict(&b, &a).unwrap().to_bits() {
            asym += 1;
        }
    }
    let tmp = tempfile::tempdir().unwrap();
    let cfg = sweep_config(tmp.path());
    let splits = cfg.splits().unwrap();
    let p = cfg.pipeline();
    let backbone = ContrastiveModel::<f32>::new(p.encoder, p.projection).unwrap().backbone();
    let before = backbone.to_checkpoint().to_bytes();
    let mut f = p.finetune;
    f.train.epochs = 3;
    finetune(&backbone, &splits.train, &splits.val, &f, None).unwrap();
    let frozen = before == backbone.to_checkpoint().to_bytes();
    verdict(
        asym == 0 && frozen,
        format!("{asym} asymmetric of 10000 pairs; backbone bytes unchanged by fine-tuning: {frozen}"),
    )
}

const ADAMW_REFERENCE: [f64; 10] = [
    0.54974999975,
    0.6490347843102241,
    0.7438582252700928,
    0.8270706965684503,
    0.8935107230559487,
    0.9407806971290109,
    0.9694724025106599,
    0.9828726048901173,
    0.9863088725160427,
    0.9863088725160427,
];

fn schedule_and_optimizer() -> Verdict {
    let mut schedule_ok = true;
    for (total, frac) in [(10, 0.2), (1000, 0.05), (37, 0.1), (3, 0.5)] {
        let c = TrainConfig {
            peak_lr: 3e-4,
            warmup_fraction: frac,
            ..Default::default()
        };
        let w = warmup_steps(total, frac);
        schedule_ok &= lr_at(w, total, &c).unwrap() == 3e-4 && lr_at(total, total, &c).unwrap() == 0.0;
    }
    let c = TrainConfig {
        peak_lr: 0.1,
        warmup_fraction: 0.2,
        optimizer: AdamWConfig::default(),
        ..Default::default()
    };
    let mut ps = ParamStore::new();
    let id = ps.add(Parameter::new("x", Tensor::from_vec(&[1], vec![0.5f64]).unwrap()));
    let mut opt = OptimizerState::new(&ps, c.optimizer);
    let mut worst: f64 = 0.0;
    for (t, want) in ADAMW_REFERENCE.iter().enumerate() {
        let x = ps.value(id).data()[0];
        ps.get_mut(id).grad.data_mut()[0] = 2.0 * (x - 1.5);
        opt.step(&mut ps, lr_at(t + 1, 10, &c).unwrap()).unwrap();
        worst = worst.max((ps.value(id).data()[0] - want).abs());
    }
    verdict(
        schedule_ok && worst < 1e-12,
        format!("peak at warm-up end and zero at the last step: {schedule_ok}; AdamW trace max error {worst:.1e}"),
    )
}

fn wdc_stats() -> Verdict {
    let Some(path) = std::env::var_os("BLOCKSCL_WDC_SMALL_TRAIN") else {
        return Verdict::Skip("set BLOCKSCL_WDC_SMALL_TRAIN to the computers-small train pair file".into());
    };
    match cmd_stats(Some(Path::new(&path)), None) {
        Ok(s) => {
            let got = [s.avg_block_size, s.avg_pos_per_block, s.avg_neg_per_block];
            let want = [6.1, 1.5, 4.5];
            let ok = got.iter().zip(want).all(|(g, w)| (g - w).abs() <= 0.1);
            verdict(ok, format!("block/pos/neg = {:.2} / {:.2} / {:.2}, expected 6.1 / 1.5 / 4.5", got[0], got[1], got[2]))
        }
        Err(e) => Verdict::Fail(format!("{e}")),
    }
}

fn reproducibility() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = sweep_config(tmp.path());
    let splits = cfg.splits().unwrap();
    let mut p = cfg.pipeline().with_seed(7);
    p.pretrain.sampler.k = 2;
    p.pretrain.sampler.q = 16;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let ra = run_pipeline::<f32>(&splits, &p, Some(&a)).unwrap();
    let rb = run_pipeline::<f32>(&splits, &p, Some(&b)).unwrap();
    let log_a = std::fs::read(a.join("metrics.jsonl")).unwrap();
    let same_log = log_a == std::fs::read(b.join("metrics.jsonl")).unwrap();
    let same_f1 = ra.test.f1.to_bits() == rb.test.f1.to_bits();
    verdict(
        same_log && same_f1,
        format!(
            "identical metrics logs ({} lines): {same_log}; identical test F1 ({:.2}): {same_f1}",
            log_a.split(|&c| c == b'\n').filter(|l| !l.is_empty()).count(),
            100.0 * ra.test.f1
        ),
    )
}

fn main() {
    let mut report = Report { hard_failures: Vec::new() };
    let t = Instant::now();
    report.record(1, "gradient correctness", true, t, gradient_correctness());
    let t = Instant::now();
    report.record(2, "loss oracle", true, t, loss_oracle());
    let t = Instant::now();
    report.record(3, "graph oracle", true, t, graph_oracle());
    let t = Instant::now();
    report.record(4, "sampler invariants", true, t, sampler_invariants());

    let t = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let rows = cmd_ablate(&sweep_config(tmp.path()), None, None, None).unwrap();
    let sweep_secs = t.elapsed().as_secs_f64();

    let vanilla = row(&rows, false, 2, 0);
    let blocking = row(&rows, true, 2, 16);
    let v5 = match (vanilla, blocking) {
        (Some(v), Some(b)) => {
            let gap = b.f1_mean - v.f1_mean;
            verdict(
                gap >= 1.0 && sweep_secs < 1800.0,
                format!(
                    "blocking k=2 q=16 {:.2} ± {:.2} vs vanilla {:.2} ± {:.2}: gap {gap:+.2} (need >= 1.00); sweep {sweep_secs:.0}s (limit 1800s)",
                    b.f1_mean, b.f1_std, v.f1_mean, v.f1_std
                ),
            )
        }
        _ => Verdict::Fail("a required cell failed".into()),
    };
    report.record(5, "blocking effect", false, t, v5);

    let t = Instant::now();
    let qs = [1, 2, 4, 16];
    let q_rows: Vec<Option<&AblationRow>> = qs.iter().map(|&q| row(&rows, true, 1, q)).collect();
    let v6 = if q_rows.iter().all(Option::is_some) {
        let means: Vec<f64> = q_rows.iter().map(|r| r.unwrap().f1_mean).collect();
        let worst_drop = means.windows(2).map(|w| w[0] - w[1]).fold(f64::NEG_INFINITY, f64::max);
        let rho = spearman(&qs.map(|q| q as f64), &means);
        verdict(
            worst_drop <= 0.3 && rho > 0.0,
            format!(
                "k=1, q=1,2,4,16 -> {}; largest adjacent drop {worst_drop:.2} (slack 0.30); Spearman {rho:.2}",
                fmt_means(&q_rows)
            ),
        )
    } else {
        Verdict::Fail(format!("missing cells: {}", fmt_means(&q_rows)))
    };
    report.record(6, "negative-count trend", false, t, v6);

    let t = Instant::now();
    let k_rows: Vec<Option<&AblationRow>> = [1, 2, 3, 6].iter().map(|&k| row(&rows, true, k, 8)).collect();
    let v7 = if k_rows.iter().all(Option::is_some) {
        let means: Vec<f64> = k_rows.iter().map(|r| r.unwrap().f1_mean).collect();
        let spread = means.iter().cloned().fold(f64::MIN, f64::max) - means.iter().cloned().fold(f64::MAX, f64::min);
        verdict(
            spread <= 1.0,
            format!("q=8, k=1,2,3,6 -> {}; spread {spread:.2} (limit 1.00)", fmt_means(&k_rows)),
        )
    } else {
        Verdict::Fail(format!("missing cells: {}", fmt_means(&k_rows)))
    };
    report.record(7, "positive-count insensitivity", false, t, v7);

    let t = Instant::now();
    report.record(8, "matcher symmetry and freeze", true, t, matcher_symmetry_and_freeze());
    let t = Instant::now();
    report.record(9, "schedule and optimizer", true, t, schedule_and_optimizer());
    let t = Instant::now();
    report.record(10, "blocking statistics on real data", true, t, wdc_stats());
    let t = Instant::now();
    report.record(11, "end-to-end reproducibility", true, t, reproducibility());

    if !report.hard_failures.is_empty() {
        eprintln!("correctness criteria failed: {:?}", report.hard_failures);
        std::process::exit(1);
    }
}
