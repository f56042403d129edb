//! End-to-end acceptance checks. Runs without the test harness so every
//! check prints exactly one `PASS`/`FAIL` line, even under plain
//! `cargo test`.

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use secap_core::autodiff::{trunc_normal, Fault};
use secap_core::checkpoint::{Checkpoint, CheckpointMeta};
use secap_core::data::{select_queries, synthesize, Manifest, ProtocolName, SampleRecord, SynthConfig};
use secap_core::eval::{cmc_map, cross_view_map, evaluate_protocols, oracle_cmc_map, EvalReport, Meta};
use secap_core::model::encoder::Block;
use secap_core::model::{init_prompts, Ablation, EncoderConfig, Lfrm, ModelConfig, ParamBuilder, Prm, PrmVariant, SeCap};
use secap_core::objectives::{orthogonality_loss, soft_triplet_loss};
use secap_core::optim::CosineSchedule;
use secap_core::train::{mean_orthogonality, model_grad_check, train, GradCheckOptions, TrainConfig, TrainData};
use secap_core::{ParamStore, Tape, Tensor};

const GRAD_TOL: f64 = 1e-4;
const SEEDS: [u64; 3] = [1, 2, 3];

type Check = (&'static str, fn() -> Outcome, bool);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl std::fmt::Display) -> Outcome {
    Outcome {
        pass,
        detail: detail.to_string(),
    }
}

fn gradients_match_central_differences() -> Outcome {
    let start = Instant::now();
    let mut worst = (0.0f64, String::new());
    for variant in [PrmVariant::Attn, PrmVariant::Add, PrmVariant::Cat] {
        for olp in [false, true] {
            let r = model_grad_check(&GradCheckOptions {
                variant,
                olp,
                ..GradCheckOptions::default()
            })
            .unwrap();
            assert!(
                r.max_rel_error < GRAD_TOL,
                "{variant} olp={olp}: {} at {}[{}]",
                r.max_rel_error,
                r.worst_param,
                r.worst_coord
            );
            if r.max_rel_error >= worst.0 {
                worst = (r.max_rel_error, format!("{variant}/olp={olp}"));
            }
        }
    }
    // The check must be able to fail.
    let broken = model_grad_check(&GradCheckOptions {
        fault: Some(Fault::GeluBackward),
        ..GradCheckOptions::default()
    })
    .unwrap();
    assert!(broken.max_rel_error > 1e-2);
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(300));
    outcome(
        true,
        format_args!(
            "6 configurations, max rel error {:.2e} ({}), corrupted GELU rule caught at {:.2e}, {:.0}s",
            worst.0,
            worst.1,
            broken.max_rel_error,
            elapsed.as_secs_f64()
        ),
    )
}

fn zeroed_residual_branches_are_identities() -> Outcome {
    let d = 64;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let random = |shape: &[usize], rng: &mut ChaCha8Rng| trunc_normal::<f64, _>(shape, 1.0, rng);

    let cfg = EncoderConfig::toy();
    let mut store = ParamStore::<f64>::new();
    let block = Block::new(&mut ParamBuilder::new(&mut store, &mut rng), &cfg).unwrap();
    block.zero_outputs(&mut store);
    let x = random(&[2, 2 + cfg.num_patches(), d], &mut rng);
    let tape = Tape::new();
    let y = block.forward(&tape, &store, tape.constant(x.clone()), None).unwrap().value();
    assert_eq!(y.data(), x.data(), "encoder block");

    for variant in [PrmVariant::Attn, PrmVariant::Add, PrmVariant::Cat] {
        let mut store = ParamStore::<f64>::new();
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        let bank = init_prompts(&mut b, 8, d).unwrap();
        let prm = Prm::new(&mut b.sub("prm"), variant, d, 4, 4).unwrap();
        prm.zero_outputs(&mut store);
        let tape = Tape::new();
        let x_inv = tape.constant(random(&[3, d], &mut rng));
        let out = prm.forward(&tape, &store, &bank, x_inv).unwrap().value();
        for row in out.data().chunks(8 * d) {
            assert_eq!(row, store.value(bank.prompts).data(), "prompt module {variant}");
        }
    }

    let mut store = ParamStore::<f64>::new();
    let lfrm = Lfrm::new(&mut ParamBuilder::new(&mut store, &mut rng), d, 4, 4).unwrap();
    for block in &lfrm.blocks {
        block.zero_outputs(&mut store);
    }
    let (p, l) = (random(&[2, 8, d], &mut rng), random(&[2, 8, d], &mut rng));
    let tape = Tape::new();
    let (mut fp, mut fl) = (tape.constant(p.clone()), tape.constant(l.clone()));
    for (i, block) in lfrm.blocks.iter().enumerate() {
        (fp, fl) = block.forward(&tape, &store, fp, fl).unwrap();
        assert_eq!(fp.value().data(), p.data(), "two-way block {i}, prompt stream");
        assert_eq!(fl.value().data(), l.data(), "two-way block {i}, image stream");
    }

    lfrm.fusion.ffn.zero_output(&mut store);
    let out = lfrm.fusion.forward(&tape, &store, fp, fl).unwrap().value();
    assert_eq!(out.shape(), [2, d]);
    assert!(out.data().iter().all(|&v| v == 0.0), "fusion output");

    outcome(
        true,
        "encoder block, 3 prompt variants, 2 two-way blocks bit-exact; fusion output exactly 0",
    )
}

/// Random instance with distractors and shared cameras.
fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<Meta>, Vec<Meta>) {
    let (nq, ng) = (rng.random_range(1..=20), rng.random_range(1..=100));
    let ids = rng.random_range(1..=8i64);
    let meta = |rng: &mut ChaCha8Rng| Meta {
        id: if rng.random_bool(0.15) { -1 } else { rng.random_range(0..ids) },
        camera: rng.random_range(0..4),
    };
    let q: Vec<Meta> = (0..nq).map(|_| Meta { id: rng.random_range(0..ids), camera: rng.random_range(0..4) }).collect();
    let g: Vec<Meta> = (0..ng).map(|_| meta(rng)).collect();
    // Coarse distances so ties occur.
    let dist = (0..nq * ng).map(|_| rng.random_range(0..20) as f64 / 10.0).collect();
    (dist, q, g)
}

fn ranking_metrics_match_the_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut compared, mut both_invalid) = (0, 0);
    let mut max_diff = 0.0f64;
    for _ in 0..1000 {
        let (dist, q, g) = random_instance(&mut rng);
        match (cmc_map(&dist, &q, &g), oracle_cmc_map(&dist, &q, &g)) {
            (Ok(a), Ok(b)) => {
                assert_eq!((a.num_valid, a.num_excluded), (b.num_valid, b.num_excluded));
                max_diff = max_diff.max((a.rank1 - b.rank1).abs()).max((a.map - b.map).abs());
                compared += 1;
            }
            (Err(_), Err(_)) => both_invalid += 1,
            (a, b) => panic!("disagreement: {a:?} vs {b:?}"),
        }
    }
    assert!(max_diff <= 1e-12, "{max_diff}");
    assert!(compared > 900);

    let q = [Meta { id: 1, camera: 0 }];
    let g = [Meta { id: 1, camera: 1 }, Meta { id: 2, camera: 1 }, Meta { id: 1, camera: 2 }];
    let hand = cmc_map(&[0.1, 0.2, 0.3], &q, &g).unwrap();
    assert!((hand.map - 0.8333).abs() < 1e-4);
    outcome(
        true,
        format_args!(
            "1000 instances ({compared} scored, {both_invalid} without valid queries), max diff {max_diff:.1e}; hand case mAP {:.4}",
            hand.map
        ),
    )
}

/// Every (anchor, positive, negative) triple, hardest per anchor.
fn triplet_oracle(x: &[Vec<f64>], labels: &[usize]) -> f64 {
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
    let n = x.len();
    let mut total = 0.0;
    for a in 0..n {
        let mut worst = f64::NEG_INFINITY;
        for p in (0..n).filter(|&p| p != a && labels[p] == labels[a]) {
            for q in (0..n).filter(|&q| labels[q] != labels[a]) {
                worst = worst.max(dist(&x[a], &x[p]) - dist(&x[a], &x[q]));
            }
        }
        total += worst.exp().ln_1p();
    }
    total / n as f64
}

fn loss_unit_values() -> Outcome {
    let tape = Tape::<f64>::new();
    let ce = tape.constant(Tensor::zeros(&[1, 2])).cross_entropy(&[1]).unwrap().item();
    assert!((ce - std::f64::consts::LN_2).abs() < 1e-6);

    let row = |v: &[f64]| tape.constant(Tensor::from_f64(&[1, v.len()], v).unwrap());
    let orth = orthogonality_loss(row(&[1., 2.]), row(&[3., -4.])).unwrap().item();
    assert_eq!(orth, 11.0);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut max_diff = 0.0f64;
    for _ in 0..200 {
        let (ids, per, dim) = (rng.random_range(2..=3), rng.random_range(2..=3), rng.random_range(1..=4));
        let labels: Vec<usize> = (0..ids * per).map(|i| i / per).collect();
        let pts: Vec<Vec<f64>> = labels.iter().map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let flat: Vec<f64> = pts.iter().flatten().copied().collect();
        let x = tape.constant(Tensor::from_f64(&[labels.len(), dim], &flat).unwrap());
        let got = soft_triplet_loss(x, &labels).unwrap().item();
        max_diff = max_diff.max((got - triplet_oracle(&pts, &labels)).abs());
    }
    assert!(max_diff < 1e-10);
    outcome(
        true,
        format_args!("CE {ce:.9}, orthogonality {orth}, soft triplet vs brute force max diff {max_diff:.1e} over 200 batches"),
    )
}

fn schedule_endpoints() -> Outcome {
    let cfg = TrainConfig::default();
    let c = corpus();
    let total = cfg.epochs * c.data(c.manifest.train()).steps_per_epoch(&cfg);
    let s = CosineSchedule::new(cfg.lr_max, cfg.lr_min, total);
    assert_eq!(s.lr(0), 8e-3);
    assert_eq!(s.lr(total), 1.6e-6);
    assert!((s.lr(total / 2) - 4.0008e-3).abs() < 1e-12);
    outcome(
        true,
        format_args!("lr(0) = {:e}, lr({total}) = {:e}, lr({}) = {:.6e}", s.lr(0), s.lr(total), total / 2, s.lr(total / 2)),
    )
}

struct Corpus {
    manifest: Manifest,
    images: Vec<Tensor<f32>>,
    by_path: HashMap<String, usize>,
}

impl Corpus {
    fn image(&self, r: &SampleRecord) -> Tensor<f32> {
        self.images[self.by_path[&r.path]].clone()
    }

    fn data(&self, records: Vec<SampleRecord>) -> TrainData {
        let images = records.iter().map(|r| self.image(r)).collect();
        TrainData::new(records, images, self.manifest.num_views).unwrap()
    }
}

fn corpus() -> &'static Corpus {
    static CORPUS: OnceLock<Corpus> = OnceLock::new();
    CORPUS.get_or_init(|| {
        let (manifest, images) = synthesize(&SynthConfig {
            num_ids: 64,
            images_per_id_per_view: 8,
            seed: 1,
            ..SynthConfig::default()
        })
        .unwrap();
        let by_path = manifest.records.iter().enumerate().map(|(i, r)| (r.path.clone(), i)).collect();
        Corpus { manifest, images, by_path }
    })
}

struct Run {
    model: SeCap,
    store: ParamStore<f32>,
    reports: Vec<EvalReport>,
    elapsed: Duration,
}

fn train_and_eval(ablation: Ablation, seed: u64, epochs: usize) -> Run {
    let c = corpus();
    let start = Instant::now();
    let mut mcfg = ModelConfig::toy(1, c.manifest.num_views);
    mcfg.ablation = ablation;
    let cfg = TrainConfig {
        epochs,
        seed,
        ..TrainConfig::toy()
    };
    let out = train(&mcfg, &cfg, &c.data(c.manifest.train()), |_, _, _| Ok(())).unwrap();
    let test = c.manifest.test();
    let load = |r: &SampleRecord| Ok(c.image(r));
    let queries = select_queries(&test, 2, load).unwrap();
    let reports = evaluate_protocols(&out.model, &out.store, &test, &queries, &ProtocolName::ALL, 64, load).unwrap();
    Run {
        model: out.model,
        store: out.store,
        reports,
        elapsed: start.elapsed(),
    }
}

const ARMS: [(&str, Ablation); 3] = [
    ("full", Ablation { no_prm: false, no_vdt: false, no_lfrm: false }),
    ("no-prm", Ablation { no_prm: true, no_vdt: false, no_lfrm: false }),
    ("baseline", Ablation::BASELINE),
];

/// The 30-epoch toy run for arm `arm` and seed `SEEDS[seed]`, trained once
/// and shared between tests.
fn run(arm: usize, seed: usize) -> &'static Run {
    static RUNS: [[OnceLock<Run>; 3]; 3] = [const { [const { OnceLock::new() }; 3] }; 3];
    RUNS[arm][seed].get_or_init(|| train_and_eval(ARMS[arm].1, SEEDS[seed], TrainConfig::toy().epochs))
}

fn protocol(r: &Run, p: ProtocolName) -> &EvalReport {
    r.reports.iter().find(|x| x.protocol == p.to_string()).unwrap()
}

fn training_beats_chance() -> Outcome {
    let r = run(0, 0);
    let test_ids = Manifest::identities(&corpus().manifest.test()).len();
    let chance = 1.0 / test_ids as f64;
    let (a2g, g2a) = (protocol(r, ProtocolName::A2G).rank1, protocol(r, ProtocolName::G2A).rank1);
    let pass = a2g >= 3.0 * chance && g2a >= 3.0 * chance && r.elapsed < Duration::from_secs(900);
    outcome(
        pass,
        format_args!(
            "Rank-1 A->G {a2g:.4}, G->A {g2a:.4}, chance {chance:.4} (need >= {:.4}), {:.0}s",
            3.0 * chance,
            r.elapsed.as_secs_f64()
        ),
    )
}

fn ablation_trend() -> Outcome {
    let mut means = [0.0; 3];
    let mut rows = Vec::new();
    for (arm, (name, _)) in ARMS.iter().enumerate() {
        let per_seed: Vec<f64> = (0..SEEDS.len()).map(|s| cross_view_map(&run(arm, s).reports).unwrap()).collect();
        means[arm] = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
        rows.push(format!("{name} {:.4} {per_seed:.3?}", means[arm]));
    }
    let pass = means[0] >= means[1] && means[0] >= means[2];
    outcome(pass, format_args!("mean cross-view mAP: {}", rows.join(", ")))
}

fn single_threaded_runs_are_identical() -> Outcome {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let once = || {
        pool.install(|| {
            let r = train_and_eval(Ablation::default(), 7, 2);
            let meta = CheckpointMeta {
                model: r.model.cfg.clone(),
                loss: TrainConfig::toy().loss,
                epoch: 2,
                seed: 7,
            };
            let json: Vec<String> = r.reports.iter().map(EvalReport::to_json).collect();
            (Checkpoint::from_store(meta, &r.store).to_bytes(), json)
        })
    };
    let (a, b) = (once(), once());
    let pass = a == b;
    outcome(
        pass,
        format_args!("two runs: {}-byte checkpoints identical = {}, reports identical = {}", a.0.len(), a.0 == b.0, a.1 == b.1),
    )
}

fn orthogonality_falls_during_training() -> Outcome {
    let c = corpus();
    let r = run(0, 0);
    let held_out = c.data(c.manifest.test());
    let train_ids = Manifest::identities(&c.manifest.train()).len();
    let (init, init_store) = SeCap::new::<f32>(&ModelConfig { num_ids: train_ids, ..r.model.cfg.clone() }, SEEDS[0]).unwrap();
    let before = mean_orthogonality(&init, &init_store, &held_out, 16, 4, 8, 99).unwrap();
    let after = mean_orthogonality(&r.model, &r.store, &held_out, 16, 4, 8, 99).unwrap();
    // Not gating: with the default view/orthogonality weight of
    // 0.001 the term is a negligible share of the loss on this corpus.
    outcome(
        after < before,
        format_args!("held-out mean loss at init {before:.4}, after training {after:.4}"),
    )
}

fn main() {
    // (name, check, gates the exit status)
    let checks: [Check; 9] = [
        ("gradient check", gradients_match_central_differences, true),
        ("residual identities", zeroed_residual_branches_are_identities, true),
        ("metric oracle", ranking_metrics_match_the_oracle, true),
        ("loss unit values", loss_unit_values, true),
        ("schedule endpoints", schedule_endpoints, true),
        ("training sanity", training_beats_chance, true),
        ("ablation trend", ablation_trend, true),
        ("determinism", single_threaded_runs_are_identical, true),
        // Reported, not gating: see the note in the check.
        ("orthogonality", orthogonality_falls_during_training, false),
    ];
    let mut gating_failures = 0;
    for (name, check, gating) in checks {
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format_args!("panicked: {msg}"))
        });
        println!("{} {name}: {}", if result.pass { "PASS" } else { "FAIL" }, result.detail);
        if !result.pass && gating {
            gating_failures += 1;
        }
    }
    if gating_failures > 0 {
        eprintln!("{gating_failures} acceptance check(s) failed");
        std::process::exit(1);
    }
}
