//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails. Criteria 7–9 train the desk-scale model twice,
//! which takes a while on a small machine.

use std::f64::consts::PI;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vecgauge::data::{build_patches, Dataset, PatchSample};
use vecgauge::decode::{decode_maps, DecodeConfig, VectorDetection};
use vecgauge::eval::{evaluate_samples, EvalConfig, EvalReport};
use vecgauge::geom::Point;
use vecgauge::gradcheck;
use vecgauge::metrics::{self, oks_pair, vds_pair, EvalInstance, MetricConfig};
use vecgauge::model::{ModelConfig, VdnModel};
use vecgauge::pipeline::{assign_boxes, compute_reading, estimate_homography, Homography};
use vecgauge::synth::SynthRanges;
use vecgauge::targets::{encode_heatmap, encode_scalarmap, GroundTruthVector};
use vecgauge::train::{scalar_weight, scheduled_loss, train, TrainConfig, TrainOutput, TrainReport};
use vecgauge::{ExecMode, Tensor};

const PATCH: usize = 128;
const MAP: usize = 32;
const LAMBDA: f64 = 0.25;
const SIGMA: f64 = 3.0;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn unit(theta: f64) -> Point {
    [theta.cos(), theta.sin()]
}

fn random_vectors(r: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<GroundTruthVector> {
    (0..n)
        .map(|_| {
            let [alpha, beta] = unit(r.random_range(-PI..PI));
            GroundTruthVector {
                x: r.random_range(lo..hi),
                y: r.random_range(lo..hi),
                alpha,
                beta,
            }
        })
        .collect()
}

fn criterion_1() -> Verdict {
    let t = Instant::now();
    let rows = gradcheck::run_suite(0).expect("gradient suite");
    let took = t.elapsed();
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    let worst_op = rows
        .iter()
        .filter(|r| r.tolerance == gradcheck::OP_TOLERANCE)
        .map(|r| r.max_rel_error)
        .fold(0.0, f64::max);
    let worst_model = rows
        .iter()
        .filter(|r| r.tolerance == gradcheck::MODEL_TOLERANCE)
        .map(|r| r.max_rel_error)
        .fold(0.0, f64::max);
    verdict(
        failed.is_empty() && took < Duration::from_secs(60),
        format!(
            "{} checks, worst op rel err {worst_op:.2e} (< 1e-4), worst model rel err {worst_model:.2e} (< 1e-3), {:.1}s, failed {failed:?}",
            rows.len(),
            took.as_secs_f64()
        ),
    )
}

fn naive_heatmap(vs: &[GroundTruthVector]) -> Vec<f64> {
    let mut out = vec![0.0; MAP * MAP];
    for j in 0..MAP {
        for i in 0..MAP {
            // max of the individual Gaussians rather than exp of the min distance
            let mut best: f64 = 0.0;
            for v in vs {
                let dx = i as f64 - LAMBDA * v.x;
                let dy = j as f64 - LAMBDA * v.y;
                best = best.max((-(dx * dx + dy * dy) / (2.0 * SIGMA * SIGMA)).exp());
            }
            out[j * MAP + i] = best;
        }
    }
    out
}

fn naive_scalarmap(vs: &[GroundTruthVector]) -> Vec<f64> {
    let plane = MAP * MAP;
    let mut out = vec![0.0; 2 * plane];
    let r = 3.0 * SIGMA;
    for j in 0..MAP {
        for i in 0..MAP {
            let inside: Vec<&GroundTruthVector> = vs
                .iter()
                .filter(|v| {
                    let dx = i as f64 - LAMBDA * v.x;
                    let dy = j as f64 - LAMBDA * v.y;
                    (dx * dx + dy * dy).sqrt() <= r
                })
                .collect();
            if inside.is_empty() {
                continue;
            }
            let c = inside.len() as f64;
            out[j * MAP + i] = inside.iter().map(|v| v.alpha).sum::<f64>() / c;
            out[plane + j * MAP + i] = inside.iter().map(|v| v.beta).sum::<f64>() / c;
        }
    }
    out
}

fn criterion_2() -> Verdict {
    let t = Instant::now();
    let mut r = rng(2);
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let n = r.random_range(1..=5);
        let vs = random_vectors(&mut r, n, -8.0, PATCH as f64 + 8.0);
        let h = encode_heatmap(&vs, MAP, MAP, LAMBDA, SIGMA);
        let s = encode_scalarmap(&vs, MAP, MAP, LAMBDA, SIGMA);
        for (a, b) in h.iter().zip(naive_heatmap(&vs)) {
            worst = worst.max((a - b).abs());
        }
        for (a, b) in s.iter().zip(naive_scalarmap(&vs)) {
            worst = worst.max((a - b).abs());
        }
    }
    let took = t.elapsed();
    verdict(
        worst <= 1e-12 && took < Duration::from_secs(60),
        format!("500 scenes, max |diff| {worst:.2e} (<= 1e-12), {:.1}s", took.as_secs_f64()),
    )
}

fn separated_scene(r: &mut ChaCha8Rng, n: usize, min_sep: f64) -> Vec<GroundTruthVector> {
    loop {
        let vs = random_vectors(r, n, 2.0, PATCH as f64 - 4.0);
        let ok = vs.iter().enumerate().all(|(i, a)| {
            vs[i + 1..]
                .iter()
                .all(|b| (a.x - b.x).hypot(a.y - b.y) > min_sep)
        });
        if ok {
            return vs;
        }
    }
}

fn criterion_3() -> Verdict {
    let mut r = rng(3);
    let cfg = DecodeConfig::default();
    let (mut tip_worst, mut dir_worst): (f64, f64) = (0.0, 0.0);
    let mut count_mismatch = 0;
    for _ in 0..500 {
        let n = r.random_range(1..=4);
        let vs = separated_scene(&mut r, n, 12.0 / LAMBDA);
        let h = encode_heatmap(&vs, MAP, MAP, LAMBDA, SIGMA);
        let s = encode_scalarmap(&vs, MAP, MAP, LAMBDA, SIGMA);
        let dets = decode_maps(&h, &s, MAP, MAP, LAMBDA, &cfg);
        if dets.len() != vs.len() {
            count_mismatch += 1;
            continue;
        }
        for v in &vs {
            let d = dets
                .iter()
                .min_by(|a, b| {
                    let da = (a.x - v.x).hypot(a.y - v.y);
                    let db = (b.x - v.x).hypot(b.y - v.y);
                    da.total_cmp(&db)
                })
                .expect("non-empty");
            tip_worst = tip_worst.max((d.x - v.x).hypot(d.y - v.y));
            let cross = d.alpha * v.beta - d.beta * v.alpha;
            let dot = d.alpha * v.alpha + d.beta * v.beta;
            dir_worst = dir_worst.max(cross.abs().atan2(dot));
        }
    }
    verdict(
        count_mismatch == 0 && tip_worst <= 1.0 / LAMBDA && dir_worst <= 1e-6,
        format!(
            "500 scenes, max tip err {tip_worst:.3} px (<= {}), max dir err {dir_worst:.2e} rad (<= 1e-6), count mismatches {count_mismatch}",
            1.0 / LAMBDA
        ),
    )
}

/// Reference AP/AR for one similarity kind, written from the definitions.
mod reference {
    use super::*;

    pub fn similarity(kind: usize, inst: &EvalInstance, d: &VectorDetection, g: &GroundTruthVector, tau: f64, kappa: f64) -> f64 {
        if kind == 0 {
            let d2 = (d.x - g.x).powi(2) + (d.y - g.y).powi(2);
            (-d2 / (2.0 * inst.bbox_area * tau * tau)).exp()
        } else {
            let nd = d.alpha.hypot(d.beta);
            let theta = if nd == 0.0 {
                PI
            } else {
                let c = (d.alpha * g.alpha + d.beta * g.beta) / (nd * g.alpha.hypot(g.beta));
                c.clamp(-1.0, 1.0).acos()
            };
            let s = inst.bbox_area.sqrt() / inst.patch_side * kappa;
            (-theta * theta / (2.0 * s * s)).exp()
        }
    }

    /// `(confidence, best similarity or None)` per detection.
    pub fn greedy(kind: usize, inst: &EvalInstance, tau: f64, kappa: f64) -> Vec<(f64, Option<f64>)> {
        let mut order: Vec<usize> = (0..inst.det.len()).collect();
        order.sort_by(|&a, &b| inst.det[b].confidence.total_cmp(&inst.det[a].confidence));
        let mut free: Vec<usize> = (0..inst.gt.len()).collect();
        order
            .into_iter()
            .map(|di| {
                let d = &inst.det[di];
                let best = free
                    .iter()
                    .enumerate()
                    .map(|(k, &gi)| (k, similarity(kind, inst, d, &inst.gt[gi], tau, kappa)))
                    .fold(None, |acc: Option<(usize, f64)>, (k, s)| match acc {
                        Some((_, bs)) if bs >= s => acc,
                        _ => Some((k, s)),
                    });
                let sim = best.map(|(k, s)| {
                    free.remove(k);
                    s
                });
                (d.confidence, sim)
            })
            .collect()
    }

    /// `(AP, AR)` at one threshold, or `None` without groundtruth.
    fn ap_ar_at(images: &[(usize, Vec<(f64, Option<f64>)>)], t: f64) -> Option<(f64, f64)> {
        let num_gt: usize = images.iter().map(|m| m.0).sum();
        if num_gt == 0 {
            return None;
        }
        let mut dets: Vec<(f64, bool)> = images
            .iter()
            .flat_map(|m| m.1.iter().map(|&(c, s)| (c, s.is_some_and(|s| s >= t))))
            .collect();
        dets.sort_by(|a, b| b.0.total_cmp(&a.0));
        // precision and recall after each cutoff
        let pr: Vec<(f64, f64)> = (1..=dets.len())
            .map(|k| {
                let tp = dets[..k].iter().filter(|d| d.1).count() as f64;
                (tp / k as f64, tp / num_gt as f64)
            })
            .collect();
        let mut ap = 0.0;
        for i in 0..=100 {
            let level = i as f64 / 100.0;
            ap += pr.iter().filter(|p| p.1 >= level).map(|p| p.0).fold(0.0, f64::max);
        }
        Some((ap / 101.0, pr.last().map_or(0.0, |p| p.1)))
    }

    fn mean_over(images: &[(usize, Vec<(f64, Option<f64>)>)], ts: &[f64]) -> (f64, f64) {
        let v: Vec<(f64, f64)> = ts.iter().filter_map(|&t| ap_ar_at(images, t)).collect();
        if v.is_empty() {
            return (-1.0, -1.0);
        }
        let n = v.len() as f64;
        (v.iter().map(|x| x.0).sum::<f64>() / n, v.iter().map(|x| x.1).sum::<f64>() / n)
    }

    /// AP, AP50, AP75, APM, APL, AR, AR50, AR75, ARM, ARL.
    pub fn table(kind: usize, insts: &[EvalInstance], cfg: &MetricConfig) -> [f64; 10] {
        let ts: Vec<f64> = (0..10).map(|k| 0.5 + 0.05 * k as f64).collect();
        let all: Vec<(f64, usize, Vec<(f64, Option<f64>)>)> = insts
            .iter()
            .map(|i| (i.bbox_area, i.gt.len(), greedy(kind, i, cfg.tau, cfg.kappa)))
            .collect();
        let pick = |f: &dyn Fn(f64) -> bool| -> Vec<(usize, Vec<(f64, Option<f64>)>)> {
            all.iter().filter(|x| f(x.0)).map(|x| (x.1, x.2.clone())).collect()
        };
        let every = pick(&|_| true);
        let medium = pick(&|a| (1024.0..9216.0).contains(&a));
        let large = pick(&|a| a >= 9216.0);
        let (ap, ar) = mean_over(&every, &ts);
        let (ap50, ar50) = mean_over(&every, &[0.5]);
        let (ap75, ar75) = mean_over(&every, &[0.75]);
        let (apm, arm) = mean_over(&medium, &ts);
        let (apl, arl) = mean_over(&large, &ts);
        [ap, ap50, ap75, apm, apl, ar, ar50, ar75, arm, arl]
    }
}

fn random_instance(r: &mut ChaCha8Rng) -> EvalInstance {
    let side = r.random_range(20.0..200.0_f64);
    let bbox_area = side * side * r.random_range(0.6..1.0);
    let ng = r.random_range(0..=6);
    let nd = r.random_range(0..=8);
    let gt = random_vectors(r, ng, 0.0, side);
    let det = (0..nd)
        .map(|k| {
            let near = (k < ng && r.random_bool(0.8)).then(|| gt[k]);
            let (x, y, theta) = match near {
                Some(g) => (
                    g.x + r.random_range(-0.2..0.2) * side,
                    g.y + r.random_range(-0.2..0.2) * side,
                    g.beta.atan2(g.alpha) + r.random_range(-0.6..0.6),
                ),
                None => (r.random_range(0.0..side), r.random_range(0.0..side), r.random_range(-PI..PI)),
            };
            let [alpha, beta] = unit(theta);
            VectorDetection {
                x,
                y,
                alpha,
                beta,
                confidence: r.random_range(0.05..1.0),
                degenerate: false,
            }
        })
        .collect();
    EvalInstance {
        gt,
        det,
        bbox_area,
        patch_side: PATCH as f64,
    }
}

fn criterion_4() -> Verdict {
    let mut r = rng(4);
    let cfg = MetricConfig::default();
    let mut worst: f64 = 0.0;
    for _ in 0..300 {
        let n = r.random_range(1..=6);
        let insts: Vec<EvalInstance> = (0..n).map(|_| random_instance(&mut r)).collect();
        let got = metrics::evaluate(&insts, &cfg).expect("metrics");
        for (kind, a) in [(0, got.oks), (1, got.vds)] {
            let lib = [a.ap, a.ap50, a.ap75, a.ap_m, a.ap_l, a.ar, a.ar50, a.ar75, a.ar_m, a.ar_l];
            for (x, y) in lib.iter().zip(reference::table(kind, &insts, &cfg)) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    let oks0 = oks_pair(0.0, 1234.5, 0.1);
    let vds0 = vds_pair(0.0, 0.7, 0.2).expect("theta in range");
    verdict(
        worst <= 1e-9 && oks0 == 1.0 && vds0 == 1.0,
        format!("300 image sets, max |diff| {worst:.2e} (<= 1e-9), oks(0) = {oks0}, vds(0) = {vds0}"),
    )
}

fn brute_min_cost(cost: &[Vec<f64>], row: usize, used: &mut [bool]) -> f64 {
    if row == cost.len() {
        return 0.0;
    }
    let mut best = f64::INFINITY;
    for c in 0..used.len() {
        if !used[c] {
            used[c] = true;
            best = best.min(cost[row][c] + brute_min_cost(cost, row + 1, used));
            used[c] = false;
        }
    }
    best
}

fn criterion_5() -> Verdict {
    let mut r = rng(5);
    // assignment optimality
    let mut hung_bad = 0;
    for _ in 0..200 {
        let n = r.random_range(1..=7);
        let m = r.random_range(n..=7);
        let det: Vec<Point> = (0..n).map(|_| [r.random_range(0.0..500.0), r.random_range(0.0..500.0)]).collect();
        let tpl: Vec<Point> = (0..m).map(|_| [r.random_range(0.0..500.0), r.random_range(0.0..500.0)]).collect();
        let a = assign_boxes(&det, &tpl);
        let cost: Vec<Vec<f64>> = det
            .iter()
            .map(|d| tpl.iter().map(|t| (d[0] - t[0]).hypot(d[1] - t[1])).collect())
            .collect();
        let got: f64 = a.pairs.iter().map(|&(i, j)| cost[i][j]).sum();
        let best = brute_min_cost(&cost, 0, &mut vec![false; m]);
        if a.pairs.len() != n || (got - best).abs() > 1e-9 * best.max(1.0) {
            hung_bad += 1;
        }
    }
    // homography recovery
    let mut dlt_worst: f64 = 0.0;
    for _ in 0..200 {
        let m = [
            [r.random_range(0.7..1.3), r.random_range(-0.3..0.3), r.random_range(-50.0..50.0)],
            [r.random_range(-0.3..0.3), r.random_range(0.7..1.3), r.random_range(-50.0..50.0)],
            [r.random_range(-5e-4..5e-4), r.random_range(-5e-4..5e-4), 1.0],
        ];
        let h = Homography::from_matrix(m).expect("invertible");
        let pairs: Vec<(Point, Point)> = (0..8)
            .map(|_| {
                let p = [r.random_range(0.0..300.0), r.random_range(0.0..300.0)];
                (p, h.apply(p).expect("finite"))
            })
            .collect();
        let (est, _) = estimate_homography(&pairs).expect("dlt");
        for (s, d) in &pairs {
            let e = est.apply(*s).expect("finite");
            dlt_worst = dlt_worst.max((e[0] - d[0]).hypot(e[1] - d[1]));
        }
    }
    // reading interpolation
    let (mut tick_bad, mut mono_bad) = (0, 0);
    for _ in 0..200 {
        let e = r.random_range(2..=12);
        let radius = r.random_range(30.0..200.0);
        let start = r.random_range(-PI..PI);
        let sweep = r.random_range(1.0..5.5);
        let pts: Vec<Point> = (0..e)
            .map(|k| {
                let a = start + sweep * k as f64 / (e - 1) as f64;
                [100.0 + radius * a.cos(), 100.0 + radius * a.sin()]
            })
            .collect();
        let mut vals = vec![r.random_range(-10.0..10.0)];
        for _ in 1..e {
            let last = *vals.last().expect("non-empty");
            vals.push(last + r.random_range(0.1..20.0));
        }
        for q in 0..e - 1 {
            if compute_reading(pts[q], q, &pts, &vals).expect("on segment") != vals[q] {
                tick_bad += 1;
            }
            let end = compute_reading(pts[q + 1], q, &pts, &vals).expect("on segment");
            if (end - vals[q + 1]).abs() > 4.0 * f64::EPSILON * vals[q + 1].abs().max(1.0) {
                tick_bad += 1;
            }
            let mut prev = f64::NEG_INFINITY;
            for k in 0..=50 {
                let t = k as f64 / 50.0;
                let p = [
                    pts[q][0] + t * (pts[q + 1][0] - pts[q][0]),
                    pts[q][1] + t * (pts[q + 1][1] - pts[q][1]),
                ];
                let v = compute_reading(p, q, &pts, &vals).expect("on segment");
                if v < prev {
                    mono_bad += 1;
                }
                prev = v;
            }
        }
    }
    verdict(
        hung_bad == 0 && dlt_worst < 1e-6 && tick_bad == 0 && mono_bad == 0,
        format!(
            "assignment mismatches {hung_bad}/200, DLT max reprojection {dlt_worst:.2e} px (< 1e-6), tick errors {tick_bad}, monotonicity violations {mono_bad}"
        ),
    )
}

fn criterion_6() -> Verdict {
    let mut r = rng(6);
    let mut problems = Vec::new();
    for _ in 0..1000 {
        let epochs = r.random_range(1..=400);
        let eps = r.random_range(0..=epochs);
        if scalar_weight(eps, epochs, 1.0) != eps as f64 / epochs as f64 {
            problems.push(format!("weight at {eps}/{epochs}"));
        }
        let mu = r.random_range(0.1..10.0);
        let w = scalar_weight(eps, epochs, mu);
        let want = mu * eps as f64 / epochs as f64;
        if (w - want).abs() > 2.0 * f64::EPSILON * want {
            problems.push(format!("weight at mu {mu}"));
        }
    }
    let t = |r: &mut ChaCha8Rng, c: usize| {
        let data: Vec<f64> = (0..c * 64).map(|_| r.random_range(-1.0..1.0)).collect();
        Tensor::new(vec![1, c, 8, 8], data).expect("shape")
    };
    for _ in 0..50 {
        let (hh, h, vh, v) = (t(&mut r, 1), t(&mut r, 1), t(&mut r, 2), t(&mut r, 2));
        let mean_sq = |a: &Tensor, b: &Tensor| {
            a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
        };
        let (l, lh, lv) = scheduled_loss(&hh, &h, &vh, &v, 73, 200, 1.0).expect("loss");
        if (lh - mean_sq(&hh, &h)).abs() > 1e-12 || (lv - mean_sq(&vh, &v)).abs() > 1e-12 {
            problems.push("mse".into());
        }
        if l != lh + (73.0 / 200.0) * lv {
            problems.push("combined loss".into());
        }
        let (l0, lh0, _) = scheduled_loss(&hh, &h, &vh, &v, 0, 200, 1.0).expect("loss");
        if l0 != lh0 {
            problems.push("epoch 0 loss".into());
        }
    }
    let long = TrainConfig::long_schedule();
    let lrs: Vec<(usize, f64)> = [0, 139, 140, 189, 190, 199].iter().map(|&e| (e, long.lr_at(e))).collect();
    let want = [1e-3, 1e-3, 1e-4, 1e-4, 1e-5, 1e-5];
    if long.epochs != 200 || lrs.iter().zip(want).any(|(a, b)| a.1 != b) {
        problems.push(format!("long schedule {lrs:?}"));
    }
    verdict(
        problems.is_empty(),
        format!("weight exact over 1000 draws, epoch-0 loss equals heatmap loss, lr at 139/140/189/190 = {:?}, problems {problems:?}", &lrs[1..5]),
    )
}

/// Training and held-out data shared by criteria 7–9.
struct Desk {
    train: Vec<PatchSample>,
    test: Vec<PatchSample>,
    test_set: Dataset,
    model: Option<VdnModel>,
    report: Option<TrainReport>,
    clean: Option<EvalReport>,
}

impl Desk {
    fn build() -> Self {
        let ranges = SynthRanges::default();
        let train_set = Dataset::generate(2000, 1, &ranges, ExecMode::Parallel).expect("train dials");
        let test_set = Dataset::generate(200, 2, &ranges, ExecMode::Parallel).expect("held-out dials");
        let train = build_patches(&train_set, PATCH, ExecMode::Parallel).expect("train patches");
        let test = build_patches(&test_set, PATCH, ExecMode::Parallel).expect("held-out patches");
        Desk {
            train,
            test,
            test_set,
            model: None,
            report: None,
            clean: None,
        }
    }

    fn fit(&self) -> (VdnModel, TrainReport) {
        let model = VdnModel::new(ModelConfig::default()).expect("model");
        let out = TrainOutput { dir: None, meta: None };
        train(model, &self.train, &TrainConfig::default(), &out, |_| {}).expect("training")
    }

    fn evaluate(&self, perturb: Option<metrics::Perturbation>) -> EvalReport {
        let model = self.model.as_ref().expect("trained");
        evaluate_samples(model, &self.test, Some(&self.test_set.templates), &EvalConfig::default(), perturb)
            .expect("evaluation")
            .report
    }
}

fn criterion_7(desk: &mut Desk) -> Verdict {
    let t = Instant::now();
    let (model, report) = desk.fit();
    let took = t.elapsed();
    desk.model = Some(model);
    desk.report = Some(report);
    let rep = desk.evaluate(None);
    let median = rep.reading.as_ref().and_then(|s| s.median_error).unwrap_or(f64::INFINITY);
    let v = verdict(
        rep.oks.ap50 >= 0.90 && rep.vds.ap50 >= 0.75 && median <= 0.05,
        format!(
            "{} train / {} held-out patches, OKS-AP50 {:.3} (>= 0.90), VDS-AP50 {:.3} (>= 0.75), median reading error {:.2}% (<= 5%), OKS-AP {:.3}, VDS-AP {:.3}, training {:.0}s",
            desk.train.len(),
            desk.test.len(),
            rep.oks.ap50,
            rep.vds.ap50,
            100.0 * median,
            rep.oks.ap,
            rep.vds.ap,
            took.as_secs_f64()
        ),
    );
    desk.clean = Some(rep);
    v
}

fn criterion_8(desk: &Desk) -> Verdict {
    let clean = desk.clean.as_ref().expect("criterion 7 ran");
    let g3 = desk.evaluate(Some(metrics::Perturbation::MaskTip(3)));
    let g9 = desk.evaluate(Some(metrics::Perturbation::MaskTip(9)));
    let drop = |r: &EvalReport| (clean.oks.ap - r.oks.ap, clean.vds.ap - r.vds.ap);
    let (o3, v3) = drop(&g3);
    let (o9, v9) = drop(&g9);
    verdict(
        o3 < o9 && v3 < v9,
        format!("OKS-AP drop {o3:.3} (mask 3) vs {o9:.3} (mask 9), VDS-AP drop {v3:.3} vs {v9:.3}"),
    )
}

fn criterion_9(desk: &Desk) -> Verdict {
    let (model, report) = desk.fit();
    let first = desk.model.as_ref().expect("criterion 7 ran");
    let ckpt_same = first.to_json().expect("json") == model.to_json().expect("json");
    let report_same = desk.report.as_ref().expect("criterion 7 ran").same_trajectory(&report);
    verdict(
        ckpt_same && report_same,
        format!("checkpoint JSON identical: {ckpt_same}, report identical (wall time excluded): {report_same}"),
    )
}

fn run(n: usize, f: impl FnOnce() -> Verdict) -> bool {
    let t = Instant::now();
    let v = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        verdict(false, format!("panicked: {msg}"))
    });
    println!(
        "criterion {n}: {} ({:.1}s) {}",
        if v.pass { "PASS" } else { "FAIL" },
        t.elapsed().as_secs_f64(),
        v.detail
    );
    v.pass
}

fn main() {
    // `cargo test` passes harness flags; listing asks for no output
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut results = vec![
        run(1, criterion_1),
        run(2, criterion_2),
        run(3, criterion_3),
        run(4, criterion_4),
        run(5, criterion_5),
        run(6, criterion_6),
    ];
    let mut desk = Desk::build();
    let trained = run(7, || criterion_7(&mut desk));
    results.push(trained);
    if desk.model.is_some() {
        results.push(run(8, || criterion_8(&desk)));
        results.push(run(9, || criterion_9(&desk)));
    } else {
        println!("criterion 8: FAIL no trained model");
        println!("criterion 9: FAIL no trained model");
        results.extend([false, false]);
    }
    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
