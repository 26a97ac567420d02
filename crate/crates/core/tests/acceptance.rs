//! Acceptance suite: one PASS/FAIL line per criterion; exits non-zero if any
//! gating criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use ndarray::Array2;
use rand::Rng;
use tafs::analysis::PairMode;
use tafs::compare::{concat_shots, correlation_map, CorrelationInputs};
use tafs::harness::{
    backbone_for, evaluate, quick_infer, run_episode, synthesize_suite, Predictor, SynthSpec, TaskSession,
};
use tafs::metrics::{expected_random_iou, random_iou_gradients, IoUAccumulator, RatioPair};
use tafs::segment::{
    binarize_at, crf_refine, decide_refinement, otsu_threshold, predict, threshold, CrfConfig, PseudoEpisode,
};
use tafs::{FeatureVolume, Grid, RgbImage};

use common::{
    correlation_oracle, counts_oracle, mixture_map, nce_grad_error, otsu_sweep, proto_grad_error, random_mask,
    random_matrix, rng, stat_grad_error, toy_config,
};

/// Suite on which adaptation is measured against untrained heads.
fn efficacy_spec(size: usize) -> SynthSpec {
    SynthSpec { width: size, height: size, separation: 1.0, color_weight: 0.3, ..SynthSpec::default() }
}

const EFFICACY_SEED: u64 = 7;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn naive_predictor() -> Outcome {
    let start = Instant::now();
    // 40 x 50 = 2000 pixels, 870 of them foreground
    let spec = SynthSpec { width: 40, height: 50, fg_ratio: (0.435, 0.435), ..SynthSpec::default() };
    let eps = synthesize_suite(20, 1, &spec).unwrap();
    let report = evaluate(&eps, &toy_config(), Predictor::Naive).unwrap();
    let s = &report.summary;
    let exact = s.miou == 0.435 && s.fbiou == 0.2175 && s.fg_percent == 100.0;
    let reported = (100.0 * s.miou - 43.0).abs() <= 1.5 && (100.0 * s.fbiou - 21.5).abs() <= 1.5;
    let secs = start.elapsed().as_secs_f64();
    outcome(
        exact && reported && secs < 10.0,
        format!(
            "mIoU {:.2} FB-IoU {:.2} %FG {:.1} (reported 43.0 / 21.5 / 100.0), {secs:.2}s",
            100.0 * s.miou,
            100.0 * s.fbiou,
            s.fg_percent
        ),
    )
}

fn metric_oracle() -> Outcome {
    let mut r = rng(100);
    let mut acc = IoUAccumulator::new(1);
    let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
    let mut counts_ok = true;
    for _ in 0..100 {
        let pred = random_mask(16, 16, r.gen_range(0.05..0.95), &mut r);
        let gt = random_mask(16, 16, r.gen_range(0.05..0.95), &mut r);
        let c = acc.accumulate(&pred, &gt, 0).unwrap();
        let o = counts_oracle(&pred, &gt);
        counts_ok &= c == o;
        tp += o.tp;
        fp += o.fp;
        fn_ += o.fn_;
        tn += o.tn;
    }
    counts_ok &= acc.intersection(1, 0) == tp
        && acc.union(1, 0) == tp + fp + fn_
        && acc.intersection(0, 0) == tn
        && acc.union(0, 0) == tn + fp + fn_;
    let fg = tp as f64 / (tp + fp + fn_) as f64;
    let bg = tn as f64 / (tn + fp + fn_) as f64;
    let dm = (acc.miou().unwrap() - fg).abs();
    let dfb = (acc.fbiou().unwrap() - 0.5 * (fg + bg)).abs();
    outcome(
        counts_ok && dm <= 1e-12 && dfb <= 1e-12,
        format!("counts exact: {counts_ok}, |dmIoU| {dm:.1e}, |dFB-IoU| {dfb:.1e}"),
    )
}

fn random_closed_forms() -> Outcome {
    let start = Instant::now();
    let mut r = rng(3);
    let mut worst: f64 = 0.0;
    for &(r_y, r_hat) in &[(0.5, 0.5), (0.3, 0.6), (0.7, 0.2)] {
        let mut acc = IoUAccumulator::new(1);
        for _ in 0..1000 {
            let gt = random_mask(64, 64, r_y, &mut r);
            let pred = random_mask(64, 64, r_hat, &mut r);
            acc.accumulate(&pred, &gt, 0).unwrap();
        }
        let (m, fb) = expected_random_iou(RatioPair::new(r_y, r_hat).unwrap());
        worst = worst.max((acc.miou().unwrap() - m).abs()).max((acc.fbiou().unwrap() - fb).abs());
    }
    let mut monotone = true;
    for r_y in [0.25, 0.5, 0.75] {
        for r_hat in [0.25, 0.5, 0.75] {
            monotone &= random_iou_gradients(RatioPair::new(r_y, r_hat).unwrap()).unwrap().0 >= 0.0;
        }
    }
    let flat = random_iou_gradients(RatioPair::new(0.5, 0.5).unwrap()).unwrap().1.abs();
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= 0.01 && monotone && flat <= 1e-12 && secs < 30.0,
        format!("Monte Carlo gap {worst:.4}, dmIoU/dr >= 0 on grid: {monotone}, |dFB-IoU/dr| at 1/2 {flat:.1e}, {secs:.1}s"),
    )
}

fn loss_gradients() -> Outcome {
    let (mut nce, mut stat, mut proto): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for seed in 0..20 {
        nce = nce.max(nce_grad_error(seed));
        stat = stat.max(stat_grad_error(seed));
        proto = proto.max(proto_grad_error(seed));
    }
    outcome(
        nce < 1e-4 && stat < 1e-4 && proto < 1e-4,
        format!("worst relative error: nce {nce:.1e}, stat {stat:.1e}, proto {proto:.1e}"),
    )
}

fn correlation_properties() -> Outcome {
    let mut r = rng(5);
    let keys = random_matrix(40, 6, &mut r);
    let values: Vec<f64> = (0..40).map(|_| r.gen_range(0.0..=1.0)).collect();
    let mean = values.iter().sum::<f64>() / 40.0;
    let zero = FeatureVolume::new(4, 5, Array2::zeros((20, 6))).unwrap();
    let uniform = correlation_map(&CorrelationInputs::new(&zero, keys.clone(), values.clone()).unwrap()).unwrap();
    let uniform_err = uniform.as_slice().iter().map(|v| (v - mean).abs()).fold(0.0, f64::max);

    let q = FeatureVolume::new(4, 5, random_matrix(20, 6, &mut r)).unwrap();
    let (k2, v2) = concat_shots(&[keys.view(), keys.view()], &[&values, &values]).unwrap();
    let one = correlation_map(&CorrelationInputs::new(&q, keys.clone(), values.clone()).unwrap()).unwrap();
    let two = correlation_map(&CorrelationInputs::new(&q, k2, v2).unwrap()).unwrap();
    let mut dup_err = one.as_slice().iter().zip(two.as_slice()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    // the same through the whole pipeline
    let cfg1 = toy_config();
    let mut cfg2 = toy_config();
    cfg2.shots = 2;
    let ep = &synthesize_suite(1, 17, &SynthSpec::default()).unwrap()[0];
    let mut doubled = ep.clone();
    doubled.support.push(ep.support[0].clone());
    let a = run_episode(ep, &cfg1, backbone_for(&cfg1).unwrap()).unwrap();
    let b = run_episode(&doubled, &cfg2, backbone_for(&cfg2).unwrap()).unwrap();
    let (pa, pb) = (&a.predictions[0], &b.predictions[0]);
    dup_err = pa.fused.as_slice().iter().zip(pb.fused.as_slice()).map(|(x, y)| (x - y).abs()).fold(dup_err, f64::max);
    let same_mask = pa.mask == pb.mask;

    let mut oracle_err: f64 = 0.0;
    for _ in 0..10 {
        let (h, w, d, n) = (r.gen_range(1..7), r.gen_range(1..7), r.gen_range(1..10), r.gen_range(1..50));
        let qm = random_matrix(h * w, d, &mut r) * 2.0;
        let km = random_matrix(n, d, &mut r) * 2.0;
        let vm: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..=1.0)).collect();
        let vol = FeatureVolume::new(h, w, qm.clone()).unwrap();
        let got = correlation_map(&CorrelationInputs::new(&vol, km.clone(), vm.clone()).unwrap()).unwrap();
        for (g, o) in got.as_slice().iter().zip(correlation_oracle(&qm, &km, &vm)) {
            oracle_err = oracle_err.max((g - o).abs());
        }
    }
    outcome(
        uniform_err < 1e-6 && dup_err < 1e-5 && same_mask && oracle_err < 1e-6,
        format!("uniform logits {uniform_err:.1e}, duplicated shot {dup_err:.1e} (mask equal: {same_mask}), loop oracle {oracle_err:.1e}"),
    )
}

fn adaptation_efficacy() -> Outcome {
    let start = Instant::now();
    let cfg = toy_config();
    let mut base_cfg = cfg.clone();
    base_cfg.loss.epochs = 0;
    let backbone = backbone_for(&cfg).unwrap();
    let eps = synthesize_suite(50, EFFICACY_SEED, &efficacy_spec(48)).unwrap();
    let (mut adapted, mut untrained) = (IoUAccumulator::new(1), IoUAccumulator::new(1));
    let (mut loss_down, mut delta_up) = (0, 0);
    for ep in &eps {
        let q = &ep.queries[0];
        let session = TaskSession::new(ep, &cfg, backbone.clone()).unwrap();
        let prepared = session.prepare_query(&q.image).unwrap();
        let task = session.fit(&prepared).unwrap();
        let pred = session.infer(&task, 0, q, &prepared).unwrap();
        adapted.add_counts(0, &pred.counts.unwrap()).unwrap();
        let trace = &task.stack.loss_trace;
        loss_down += usize::from(trace.last().unwrap() < trace.first().unwrap());
        let sims = session.similarities(&task, &prepared, q.mask.as_ref().unwrap(), PairMode::Exact).unwrap();
        let delta = |v: &[tafs::analysis::LevelSimilarity]| {
            let d: Vec<f64> = v.iter().filter_map(|l| l.delta_qs).collect();
            d.iter().sum::<f64>() / d.len() as f64
        };
        delta_up += usize::from(delta(&sims.after) > delta(&sims.before));

        let session0 = TaskSession::new(ep, &base_cfg, backbone.clone()).unwrap();
        let task0 = session0.fit(&prepared).unwrap();
        untrained.add_counts(0, &session0.infer(&task0, 0, q, &prepared).unwrap().counts.unwrap()).unwrap();
    }
    let (m, m0) = (adapted.miou().unwrap(), untrained.miou().unwrap());
    let gain = 100.0 * (m - m0);
    let secs = start.elapsed().as_secs_f64();
    outcome(
        loss_down >= 45 && delta_up >= 45 && gain >= 5.0 && secs < 300.0,
        format!(
            "loss decreased {loss_down}/50, inter query-support delta increased {delta_up}/50, \
             mIoU {:.2} vs untrained {:.2} ({gain:+.2}), {secs:.0}s",
            100.0 * m,
            100.0 * m0
        ),
    )
}

fn quick_infer_stability() -> Outcome {
    let cfg = toy_config();
    let backbone = backbone_for(&cfg).unwrap();
    let spec = SynthSpec { queries: 20, ..efficacy_spec(32) };
    let eps = synthesize_suite(5, EFFICACY_SEED, &spec).unwrap();
    let (mut per_query, mut reused) = (IoUAccumulator::new(1), IoUAccumulator::new(1));
    for ep in &eps {
        for r in run_episode(ep, &cfg, backbone.clone()).unwrap().records() {
            per_query.add_counts(0, &r.counts).unwrap();
        }
        let session = TaskSession::new(ep, &cfg, backbone.clone()).unwrap();
        let task = session.fit(&session.prepare_query(&ep.queries[0].image).unwrap()).unwrap();
        for r in quick_infer(&session, &task, ep).unwrap().records() {
            reused.add_counts(0, &r.counts).unwrap();
        }
    }
    let (a, b) = (100.0 * per_query.miou().unwrap(), 100.0 * reused.miou().unwrap());
    outcome(a - b <= 2.0, format!("per-query mIoU {a:.2}, fit-once mIoU {b:.2}, drop {:.2}", a - b))
}

fn threshold_correctness() -> Outcome {
    let mut r = rng(8);
    let mut sweep_ok = 0;
    for _ in 0..50 {
        let map = mixture_map(r.gen_range(8..40), r.gen_range(8..40), &mut r);
        let ok = match (otsu_threshold(&map), otsu_sweep(map.as_slice(), 1e-9)) {
            (None, None) => true,
            (Some(t), Some((min, width, near))) => near.contains(&(((t - min) / width).round() as usize)),
            _ => false,
        };
        sweep_ok += usize::from(ok);
    }
    let mut above_mean = true;
    for _ in 0..500 {
        let map = mixture_map(r.gen_range(1..20), r.gen_range(1..20), &mut r);
        let (lo, hi) = map.min_max();
        let t = threshold(&map);
        above_mean &= t >= map.mean().clamp(lo, hi);
    }
    let constant = [0.0, 0.25, 0.37, 1.0].iter().all(|&v| threshold(&Grid::filled(6, 6, v)) == v);
    outcome(
        sweep_ok == 50 && above_mean && constant,
        format!("sweep agreement {sweep_ok}/50, threshold >= mean: {above_mean}, constant fallback: {constant}"),
    )
}

/// Two-colour image (left half red) with per-pixel scores from a
/// one-dimensional correlation; `flip` lists pixels whose evidence is inverted.
fn constructed_pseudo(image: RgbImage, flip: impl Fn(usize, usize) -> bool) -> PseudoEpisode {
    let (w, h) = image.dims();
    let mask = Grid::from_fn(w, h, |x, _| x < w / 2);
    let q = FeatureVolume::from_fn(h, w, 1, |y, x, _| {
        let s = if x < w / 2 { 1.2 } else { -1.2 };
        if flip(x, y) { -s } else { s }
    });
    let keys = Array2::from_shape_vec((2, 1), vec![1.0, -1.0]).unwrap();
    let level = CorrelationInputs::new(&q, keys, vec![1.0, 0.0]).unwrap();
    PseudoEpisode { image, mask, levels: vec![level] }
}

fn refinement_contract() -> Outcome {
    let (w, h) = (32, 24);
    let halves: RgbImage = Grid::from_fn(w, h, |x, _| if x < w / 2 { [220.0, 30.0, 30.0] } else { [30.0, 30.0, 220.0] });
    let stripes: RgbImage = Grid::from_fn(w, h, |_, y| if y < h / 2 { [220.0, 30.0, 30.0] } else { [30.0, 30.0, 220.0] });
    let mut r = rng(9);
    let noise: Vec<bool> = (0..w * h).map(|_| r.gen_bool(0.12)).collect();
    let cases = [
        ("noisy scores, aligned colours", constructed_pseudo(halves.clone(), |x, y| noise[y * w + x]), true),
        ("clean scores, crossing colours", constructed_pseudo(stripes, |_, _| false), false),
        ("clean scores, aligned colours", constructed_pseudo(halves, |_, _| false), false),
    ];
    let cfg = CrfConfig::default();
    let mut all = true;
    let mut notes = Vec::new();
    for (name, pseudo, expect) in &cases {
        let d = decide_refinement(pseudo, &cfg).unwrap();
        let rule = d.refine == (d.iou_refined > d.iou_unrefined);
        let maps: Vec<_> = pseudo.levels.iter().map(|l| correlation_map(l).unwrap()).collect();
        let pred = predict(&pseudo.image, maps, Some(d), &cfg).unwrap();
        let plain = binarize_at(&pred.fused, pred.threshold);
        let crf = crf_refine(&pseudo.image, &pred.fused, pred.threshold, &cfg).unwrap();
        let branch = pred.refined == d.refine && pred.mask == if d.refine { crf } else { plain };
        all &= rule && branch && d.refine == *expect;
        notes.push(format!("{name}: {:.3} vs {:.3} -> refine {}", d.iou_refined, d.iou_unrefined, d.refine));
    }
    outcome(all, notes.join("; "))
}

fn main() -> ExitCode {
    let criteria: [(u32, &str, fn() -> Outcome); 9] = [
        (1, "naive predictor", naive_predictor),
        (2, "metric oracle", metric_oracle),
        (3, "random predictor closed forms", random_closed_forms),
        (4, "loss gradients", loss_gradients),
        (5, "correlation map properties", correlation_properties),
        (6, "adaptation efficacy", adaptation_efficacy),
        (7, "quick-infer stability", quick_infer_stability),
        (8, "threshold correctness", threshold_correctness),
        (9, "refinement decision", refinement_contract),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (id, name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| f == &id.to_string() || name.contains(f.as_str())) {
            continue;
        }
        let (pass, detail) = match catch_unwind(AssertUnwindSafe(run)) {
            Ok(o) => (o.pass, o.detail),
            Err(e) => {
                let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
                (false, format!("panicked: {}", msg.unwrap_or_default()))
            }
        };
        failed += usize::from(!pass);
        println!("criterion {id} [{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    }
    println!("criterion 10 [SKIP] full-scale benchmark numbers: needs pretrained weights and benchmark data, not gating");
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
