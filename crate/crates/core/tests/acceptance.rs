//! End-to-end acceptance suite. Runs every criterion in order and prints one PASS/FAIL line
//! per criterion; exits non-zero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 1 2 3`.

mod common;

use std::time::{Duration, Instant};

use asl2pet::datasets::{load_manifest, DatasetHandle, Pairing};
use asl2pet::evaluator::{
    ablate, anova_rm, baseline, build_report, evaluate, folds, render_csv, render_jsonl, render_table, AblationConfig,
    Aggregates,
};
use asl2pet::losses::{mse, paired_loss, psnr, ssim, SsimParams};
use asl2pet::model::gates::{ChannelGate, SpatialGate};
use asl2pet::model::{EdgeKind, ModelConfig, Network, Node, ParamGroup};
use asl2pet::nn::{Adam, Tensor};
use asl2pet::phantoms::{generate_corpus, CorpusOptions};
use asl2pet::trainer::{Phase, TrainSchedule, Trainer};
use common::{random_tensor, rel_err};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CORPUS_SEED: u64 = 2024;
const FOLDS: usize = 3;
const LEARNING_ITERATIONS: u64 = 2000;
/// Floor on held-out SSIM minus baseline SSIM.
const MARGIN_FLOOR: f64 = 0.05;
/// First verified run measured a margin of MEASURED_MARGIN; the frozen threshold keeps 0.02 of slack.
const MEASURED_MARGIN: f64 = 0.456;
const FROZEN_MARGIN: f64 = MEASURED_MARGIN - 0.02;
const ABLATION_ITERATIONS: u64 = 500;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn within(elapsed: Duration, limit_secs: u64) -> bool {
    elapsed <= Duration::from_secs(limit_secs)
}

fn desk_corpus() -> (tempfile::TempDir, DatasetHandle) {
    let dir = tempfile::tempdir().unwrap();
    let (_, path) = generate_corpus(8, 16, CORPUS_SEED, dir.path(), &CorpusOptions::default()).unwrap();
    let h = load_manifest(&path).unwrap();
    (dir, h)
}

fn metric_oracles() -> Outcome {
    let p = SsimParams::default();
    let x = random_tensor([4, 1, 32, 32], 1, 0.0, 1.0);
    let y = random_tensor([4, 1, 32, 32], 2, 0.0, 1.0);
    let identity = ssim(&x, &x, &p).unwrap().iter().all(|&s| s == 1.0);

    let c1 = 0.01f64.powi(2);
    let mut luminance_err = 0.0f64;
    for (a, b) in [(0.2, 0.4), (0.1, 0.9), (0.5, 0.5), (0.0, 0.3)] {
        let want = (2.0 * a * b + c1) / (a * a + b * b + c1);
        let got = ssim(&Tensor::filled([1, 1, 16, 16], a), &Tensor::filled([1, 1, 16, 16], b), &p).unwrap()[0];
        luminance_err = luminance_err.max((got - want).abs());
    }

    let got_mse = mse(&x, &y).unwrap();
    let got_psnr = psnr(&x, &y, 1.0).unwrap();
    let mut mse_err = 0.0f64;
    let mut psnr_err = 0.0f64;
    for s in 0..4 {
        let (a, b) = (x.channel(s, 0), y.channel(s, 0));
        let mut sum = 0.0;
        for i in 0..32 {
            for j in 0..32 {
                sum += (a[i * 32 + j] - b[i * 32 + j]).powi(2);
            }
        }
        let m = sum / 1024.0;
        mse_err = mse_err.max((got_mse[s] - m).abs());
        psnr_err = psnr_err.max((got_psnr[s] - 10.0 * (1.0 / m).log10()).abs());
    }
    let pass = identity && luminance_err < 1e-9 && mse_err < 1e-9 && psnr_err < 1e-9;
    outcome(
        pass,
        format!("ssim(x,x)=1 {identity}, luminance err {luminance_err:.1e}, mse err {mse_err:.1e}, psnr err {psnr_err:.1e}"),
    )
}

fn central_difference(n: usize, h: f64, mut f: impl FnMut(usize, f64) -> f64) -> Vec<f64> {
    (0..n).map(|i| (f(i, h) - f(i, -h)) / (2.0 * h)).collect()
}

fn gradient_checks() -> Outcome {
    let h = 1e-3;
    let p = SsimParams::default();

    let pet_gt = random_tensor([2, 1, 16, 16], 10, 0.0, 1.0);
    let asl_gt = random_tensor([2, 1, 16, 16], 11, 0.0, 1.0);
    let pet = random_tensor([2, 1, 16, 16], 12, 0.0, 1.0);
    let asl = random_tensor([2, 1, 16, 16], 13, 0.0, 1.0);
    let terms = paired_loss(&pet, &pet_gt, &asl, &asl_gt, &p).unwrap();
    let perturbed = |which: usize| {
        central_difference(pet.len(), h, |i, d| {
            let (mut a, mut b) = (pet.clone(), asl.clone());
            if which == 0 {
                a.data_mut()[i] += d
            } else {
                b.data_mut()[i] += d
            }
            paired_loss(&a, &pet_gt, &b, &asl_gt, &p).unwrap().value
        })
    };
    let mut analytic = terms.grad_pet.unwrap().into_vec();
    analytic.extend(terms.grad_asl.unwrap().into_vec());
    let mut numeric = perturbed(0);
    numeric.extend(perturbed(1));
    let e_loss = rel_err(&analytic, &numeric);

    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut cg = ChannelGate::<f64>::new("g", 8, &mut rng);
    let x = random_tensor([2, 8, 8, 8], 15, -1.0, 1.0);
    let w = random_tensor([2, 8, 8, 8], 16, -1.0, 1.0);
    let dot = |a: &Tensor<f64>| a.data().iter().zip(w.data()).map(|(u, v)| u * v).sum::<f64>();
    cg.forward(&x, true);
    let g = cg.backward(&w);
    let mut analytic = g.into_vec();
    let mut numeric = central_difference(x.len(), h, |i, d| {
        let mut xp = x.clone();
        xp.data_mut()[i] += d;
        dot(&cg.clone().forward(&xp, false))
    });
    let n_params: Vec<usize> = cg.params().iter().map(|q| q.len()).collect();
    for (k, &len) in n_params.iter().enumerate() {
        analytic.extend(cg.params()[k].grad.iter().copied());
        numeric.extend(central_difference(len, h, |i, d| {
            let mut c = cg.clone();
            c.params_mut()[k].value[i] += d;
            dot(&c.forward(&x, false))
        }));
    }
    let e_channel = rel_err(&analytic, &numeric);

    let mut sg = SpatialGate::<f64>::new("s");
    sg.weight.value[0] = 3.0;
    sg.bias.value[0] = -1.0;
    let a_in = random_tensor([2, 1, 16, 16], 17, 0.0, 1.0);
    let offsets = random_tensor([2, 1, 16, 16], 18, 0.05, 0.4);
    let signs = random_tensor([2, 1, 16, 16], 20, -1.0, 1.0);
    let mut recon = a_in.zip_map(&offsets.zip_map(&signs, |o, s| if s < 0.0 { -o } else { o }), |x, d| x - d);
    for s in 0..2 {
        // unique per-slice peak keeps the normalising maximum in place under the step
        recon.channel_mut(s, 0)[40 + s] = a_in.channel(s, 0)[40 + s] + 2.0;
    }
    let wm = random_tensor([2, 1, 16, 16], 19, -1.0, 1.0);
    let dot_m = |a: &Tensor<f64>| a.data().iter().zip(wm.data()).map(|(u, v)| u * v).sum::<f64>();
    sg.forward(&a_in, &recon, true);
    let (g_in, _) = sg.backward(&wm);
    let mut analytic = g_in.into_vec();
    analytic.extend([sg.weight.grad[0], sg.bias.grad[0]]);
    let mut numeric = central_difference(a_in.len(), h, |i, d| {
        let mut ap = a_in.clone();
        ap.data_mut()[i] += d;
        dot_m(&sg.clone().forward(&ap, &recon, false))
    });
    numeric.extend(central_difference(2, h, |i, d| {
        let mut s = sg.clone();
        if i == 0 {
            s.weight.value[0] += d
        } else {
            s.bias.value[0] += d
        }
        dot_m(&s.forward(&a_in, &recon, false))
    }));
    let e_spatial = rel_err(&analytic, &numeric);

    let pass = e_loss < 1e-3 && e_channel < 1e-3 && e_spatial < 1e-3;
    outcome(
        pass,
        format!("relative errors: paired loss {e_loss:.1e}, channel gate {e_channel:.1e}, spatial gate {e_spatial:.1e}"),
    )
}

fn structural_invariants() -> Outcome {
    let mut asl_skips = 0;
    let mut partition = true;
    for c in AblationConfig::ALL.iter().filter(|c| c.multitask) {
        let net = Network::<f32>::build(&c.model_config(&ModelConfig::default()), 0).unwrap();
        asl_skips += net
            .topology()
            .iter()
            .filter(|e| e.kind == EdgeKind::Skip && matches!(e.to, Node::AslDecoder(_) | Node::AslHead))
            .count();
        let into_asl: Vec<_> = net
            .topology()
            .into_iter()
            .filter(|e| matches!(e.to, Node::AslDecoder(_)) && !matches!(e.from, Node::AslDecoder(_)))
            .collect();
        partition &= into_asl.len() == 1 && into_asl[0].from == Node::Bottleneck;
        let total = net.count_parameters(None);
        partition &= ParamGroup::ALL.iter().map(|&g| net.count_parameters(Some(g))).sum::<usize>() == total;
    }
    let counts: Vec<usize> = [
        AblationConfig::new(true, false, false, false),
        AblationConfig::new(true, true, false, false),
        AblationConfig::new(true, true, true, false),
        AblationConfig::new(true, true, true, true),
    ]
    .iter()
    .map(|c| Network::<f32>::build(&c.model_config(&ModelConfig::default()), 0).unwrap().count_parameters(None))
    .collect();
    let ordered = counts.windows(2).all(|w| w[0] < w[1]);
    outcome(
        asl_skips == 0 && partition && ordered,
        format!("skip edges into ASL decoder {asl_skips}, groups partition {partition}, counts {counts:?}"),
    )
}

fn schedule_laws() -> Outcome {
    let (_d, h) = common::corpus(4, 4, 16, 1);
    let schedule = TrainSchedule {
        total_iterations: 1000,
        batch_size: 2,
        optimizer: Adam {
            lr: 1e-3,
            ..Adam::default()
        },
        ..TrainSchedule::default()
    };
    let mut t = Trainer::new(&common::tiny_model(), &schedule, &h, Some(&h)).unwrap();
    let pet_exclusive = |net: &Network<f32>| -> Vec<Vec<f32>> {
        net.named_params()
            .into_iter()
            .filter(|(g, _)| matches!(g, ParamGroup::PetDecoder | ParamGroup::Gates))
            .map(|(_, p)| p.value.clone())
            .collect()
    };
    let (mut parity, mut alternation, mut isolation) = (0, 0, 0);
    for i in 0..1000u64 {
        let before = pet_exclusive(t.network());
        let r = t.step().unwrap();
        if r.iteration != i || r.phase != if i % 2 == 0 { Phase::Coarse } else { Phase::Fine } {
            parity += 1;
        }
        if r.dataset != if (i / 5) % 2 == 0 { Pairing::Paired } else { Pairing::Unpaired } {
            alternation += 1;
        }
        if r.dataset == Pairing::Unpaired && pet_exclusive(t.network()) != before {
            isolation += 1;
        }
    }
    outcome(
        parity + alternation + isolation == 0,
        format!("violations over 1000 iterations: phase {parity}, dataset {alternation}, PET-side change {isolation}"),
    )
}

fn learning_experiment(h: &DatasetHandle) -> Outcome {
    let paired: Vec<u64> = h.paired().map(|s| s.id).collect();
    let schedule = TrainSchedule {
        total_iterations: LEARNING_ITERATIONS,
        ..TrainSchedule::default()
    };
    let held_out = folds(&paired, FOLDS, schedule.seed).unwrap().swap_remove(0);
    let train_ids: Vec<u64> = paired.iter().copied().filter(|i| !held_out.contains(i)).collect();
    let unpaired_ids: Vec<u64> = h.unpaired().map(|s| s.id).collect();
    let mut t = Trainer::new(
        &ModelConfig::default(),
        &schedule,
        &h.subset(&train_ids).unwrap(),
        Some(&h.subset(&unpaired_ids).unwrap()),
    )
    .unwrap();
    t.run(&Default::default()).unwrap();
    let (mut net, _) = t.finish();
    let model = Aggregates::of(&evaluate(&mut net, h, &held_out).unwrap()).all.ssim.mean;
    let base = Aggregates::of(&baseline(h, &held_out).unwrap()).all.ssim.mean;
    let margin = model - base;
    outcome(
        margin >= MARGIN_FLOOR && margin >= FROZEN_MARGIN,
        format!(
            "held-out SSIM {model:.4} vs baseline {base:.4}: margin {margin:.4} (frozen threshold {FROZEN_MARGIN:.3}, floor {MARGIN_FLOOR})"
        ),
    )
}

fn ablation_direction(h: &DatasetHandle) -> Outcome {
    let schedule = TrainSchedule {
        total_iterations: ABLATION_ITERATIONS,
        ..TrainSchedule::default()
    };
    let plain = AblationConfig::new(true, false, false, false);
    let results = ablate(h, FOLDS, &[plain, AblationConfig::REFERENCE], &ModelConfig::default(), &schedule).unwrap();
    let (lo, hi) = (results[0].fold_mean_ssim(), results[1].fold_mean_ssim());
    outcome(
        hi >= lo,
        format!("fold-mean SSIM over {FOLDS} folds at {ABLATION_ITERATIONS} iterations: {} {hi:.4}, {} {lo:.4}", AblationConfig::REFERENCE, plain),
    )
}

/// Treatment F from sums of squares accumulated cell by cell.
fn anova_oracle(t: &[Vec<f64>]) -> f64 {
    let (n, k) = (t.len() as f64, t[0].len() as f64);
    let grand = t.iter().flatten().sum::<f64>() / (n * k);
    let mut ss_total = 0.0;
    for v in t.iter().flatten() {
        ss_total += (v - grand).powi(2);
    }
    let mut ss_treat = 0.0;
    for j in 0..t[0].len() {
        let m = t.iter().map(|r| r[j]).sum::<f64>() / n;
        ss_treat += n * (m - grand).powi(2);
    }
    let mut ss_subj = 0.0;
    for r in t {
        let m = r.iter().sum::<f64>() / k;
        ss_subj += k * (m - grand).powi(2);
    }
    let ss_err = ss_total - ss_treat - ss_subj;
    (ss_treat / (k - 1.0)) / (ss_err / ((n - 1.0) * (k - 1.0)))
}

fn anova_oracle_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst = 0.0f64;
    let mut shift_mismatches = 0;
    for _ in 0..1000 {
        let t: Vec<Vec<f64>> = (0..4).map(|_| (0..4).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
        let f = anova_rm(&t).unwrap().f;
        let want = anova_oracle(&t);
        worst = worst.max((f - want).abs() / want.abs().max(1.0));

        // dyadic cells and integer shifts keep every intermediate exact
        let d: Vec<Vec<f64>> = (0..4).map(|_| (0..4).map(|_| rng.random_range(0..64) as f64 / 8.0).collect()).collect();
        let c = rng.random_range(-16..16) as f64;
        let shifted: Vec<Vec<f64>> = d.iter().map(|r| r.iter().map(|v| v + c).collect()).collect();
        match (anova_rm(&d), anova_rm(&shifted)) {
            (Ok(a), Ok(b)) if a.f.to_bits() == b.f.to_bits() && a.p.to_bits() == b.p.to_bits() => {}
            (Err(_), Err(_)) => {}
            _ => shift_mismatches += 1,
        }
    }
    outcome(
        worst <= 1e-9 && shift_mismatches == 0,
        format!("worst F deviation {worst:.1e} over 1000 tables, inexact shifts {shift_mismatches}"),
    )
}

fn report_determinism() -> Outcome {
    let (_d, h) = common::corpus(6, 4, 16, 8);
    let schedule = TrainSchedule {
        total_iterations: 20,
        batch_size: 2,
        ..TrainSchedule::default()
    };
    let configs = [AblationConfig::new(true, false, false, false), AblationConfig::REFERENCE];
    let render = || {
        let results = ablate(&h, FOLDS, &configs, &common::tiny_model(), &schedule).unwrap();
        let report = build_report(results, h.digest(), FOLDS, &common::tiny_model(), &schedule).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = asl2pet::evaluator::write_report(dir.path(), &report).unwrap();
        let bytes: Vec<Vec<u8>> = [files.jsonl, files.table, files.csv].iter().map(|p| std::fs::read(p).unwrap()).collect();
        (bytes, render_jsonl(&report) + &render_table(&report) + &render_csv(&report))
    };
    let (a, ra) = render();
    let (b, rb) = render();
    outcome(a == b && ra == rb, format!("two ablate runs, {} report bytes each, identical {}", a.iter().map(Vec::len).sum::<usize>(), a == b))
}

fn main() {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: usize| only.is_empty() || only.contains(&n);
    let desk = if wanted(5) || wanted(6) { Some(desk_corpus()) } else { None };
    let desk_handle = || &desk.as_ref().unwrap().1;

    type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;
    let criteria: Vec<(usize, &str, Option<u64>, Check)> = vec![
        (1, "metric oracles", Some(5), Box::new(metric_oracles)),
        (2, "gradient checks", Some(60), Box::new(gradient_checks)),
        (3, "structural invariants", Some(5), Box::new(structural_invariants)),
        (4, "schedule laws", Some(30), Box::new(schedule_laws)),
        (5, "desk-scale learning", Some(3600), Box::new(|| learning_experiment(desk_handle()))),
        (6, "ablation direction", None, Box::new(|| ablation_direction(desk_handle()))),
        (7, "ANOVA oracle", None, Box::new(anova_oracle_check)),
        (8, "report determinism", None, Box::new(report_determinism)),
    ];
    let mut failed = Vec::new();
    for (n, name, limit, check) in criteria {
        if !wanted(n) {
            continue;
        }
        let start = Instant::now();
        let o = check();
        let elapsed = start.elapsed();
        let in_time = limit.is_none_or(|s| within(elapsed, s));
        let pass = o.pass && in_time;
        let budget = limit.map_or(String::new(), |s| format!(" / {s} s"));
        println!(
            "{} criterion {n} {name}: {} [{:.1} s{budget}]",
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            elapsed.as_secs_f64()
        );
        if !pass {
            failed.push(n);
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
