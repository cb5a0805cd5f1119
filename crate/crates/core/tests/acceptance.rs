//! End-to-end acceptance checks. Each test prints one PASS/FAIL line.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Mutex;
use std::time::Instant;

use mixtd_core::accel::{divisors, PipelineDesign};
use mixtd_core::decompose::random_rank_one;
use mixtd_core::dse::write_search_log;
use mixtd_core::fixtures::{desk_platform, resnet18_shapes, resnet18_td, tiny_cnn};
use mixtd_core::rng::stream;
use mixtd_core::surrogate::{holdout_split, score, total_macs_index};
use mixtd_core::*;

/// Timed criteria run one at a time so their clocks do not overlap.
static SERIAL: Mutex<()> = Mutex::new(());

fn verdict(n: usize, ok: bool, detail: String) {
    // Written to the raw handle so the line shows even when output is captured.
    let status = if ok { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {n:>2}: {status} ({detail})");
    assert!(ok, "criterion {n} failed: {detail}");
}

fn random(shape: &[usize], seed: &[u64]) -> DenseTensor {
    DenseTensor::random_uniform(shape, -1.0, 1.0, &mut stream(seed)).unwrap()
}

const SIDES: [usize; 4] = [2, 4, 8, 16];

#[test]
fn c01_decomposition_exactness() {
    let _serial = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let (mut worst_svd, mut worst_cpd) = (0.0f64, 0.0f64);
    let mut max_sweeps = 0;
    for i in 0..200u64 {
        let c_out = SIDES[(i % 4) as usize];
        let c_in = SIDES[((i / 4) % 4) as usize];
        let k = [1, 3][((i / 16) % 2) as usize];
        let shape = WeightShape::new(c_out, c_in, k);
        let w = random(&shape.dims(), &[1, i]);
        let r = LayerTDConfig::max_rank(TdFormat::Svd, 1, 1, shape);
        let d = decompose_layer(&w, &LayerTDConfig::svd(1, 1, r), &AlsSettings::default()).unwrap();
        worst_svd = worst_svd.max(relative_error(&d, &w).unwrap().value);

        let (w1, _) = random_rank_one(shape, &mut stream(&[2, i])).unwrap();
        let d = decompose_layer(
            &w1,
            &LayerTDConfig::cpd(1, 1, 1),
            &AlsSettings::with_seed(i),
        )
        .unwrap();
        worst_cpd = worst_cpd.max(relative_error(&d, &w1).unwrap().value);
        max_sweeps = max_sweeps.max(d.chunks[0].fit.sweeps);
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(
        1,
        worst_svd <= 1e-8 && worst_cpd <= 1e-6 && max_sweeps <= 200 && secs < 60.0,
        format!(
            "svd max error {worst_svd:.2e}, cpd max error {worst_cpd:.2e} in at most {max_sweeps} sweeps, {secs:.1}s"
        ),
    );
}

#[test]
fn c02_param_count_matches_factors() {
    let _serial = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let mut pairs = 0;
    let mut mismatches = Vec::new();
    let als = AlsSettings {
        max_sweeps: 1,
        ..AlsSettings::default()
    };
    for &c_out in &SIDES {
        for &c_in in &SIDES {
            for k in [1, 3] {
                let shape = WeightShape::new(c_out, c_in, k);
                let w = random(&shape.dims(), &[3, c_out as u64, c_in as u64, k as u64]);
                for g1 in divisors(c_out).into_iter().filter(|g| g <= &4) {
                    for g2 in divisors(c_in).into_iter().filter(|g| g <= &4) {
                        let svd_max = LayerTDConfig::max_rank(TdFormat::Svd, g1, g2, shape);
                        let ranks = [1, 2, 3, svd_max / 2, svd_max];
                        let mut cfgs: Vec<LayerTDConfig> = ranks
                            .iter()
                            .filter(|&&r| r >= 1 && r <= svd_max)
                            .map(|&r| LayerTDConfig::svd(g1, g2, r))
                            .collect();
                        cfgs.dedup();
                        cfgs.extend([1, 4, 9].map(|r| LayerTDConfig::cpd(g1, g2, r)));
                        for cfg in cfgs {
                            let d = decompose_layer(&w, &cfg, &als).unwrap();
                            let stored: usize = d
                                .chunks
                                .iter()
                                .flat_map(|c| &c.factors)
                                .map(DenseTensor::len)
                                .sum();
                            if stored != param_count(&cfg, shape) {
                                mismatches.push((shape, cfg));
                            }
                            pairs += 1;
                        }
                    }
                }
            }
        }
    }
    verdict(
        2,
        pairs >= 500 && mismatches.is_empty(),
        format!("{pairs} pairs, {} mismatches", mismatches.len()),
    );
}

fn naive_conv(x: &DenseTensor, w: &DenseTensor, pad: usize) -> DenseTensor {
    let &[b, m, n, c_in] = x.shape() else {
        unreachable!()
    };
    let &[c_out, _, k, _] = w.shape() else {
        unreachable!()
    };
    let (mo, no) = (m + 2 * pad + 1 - k, n + 2 * pad + 1 - k);
    let mut out = vec![0.0; b * mo * no * c_out];
    for bi in 0..b {
        for oy in 0..mo {
            for ox in 0..no {
                for co in 0..c_out {
                    let mut s = 0.0;
                    for ci in 0..c_in {
                        for dy in 0..k {
                            for dx in 0..k {
                                let (y, xx) = (oy + dy, ox + dx);
                                if y < pad || xx < pad || y - pad >= m || xx - pad >= n {
                                    continue;
                                }
                                s += x.get(&[bi, y - pad, xx - pad, ci]) * w.get(&[co, ci, dy, dx]);
                            }
                        }
                    }
                    out[((bi * mo + oy) * no + ox) * c_out + co] = s;
                }
            }
        }
    }
    DenseTensor::new(vec![b, mo, no, c_out], out).unwrap()
}

#[test]
fn c03_staged_forward_equivalence() {
    let _serial = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let mut worst = 0.0f64;
    let mut cases = 0;
    for &c_out in &SIDES[..3] {
        for &c_in in &SIDES[..3] {
            for k in [1, 3] {
                let decl = LayerDecl::conv("c", c_in, c_out, k, 1, k / 2);
                let net =
                    NetworkSpec::build("one", [2, 5, 5, c_in], &[decl], BTreeMap::new()).unwrap();
                let layer = &net.layers[0];
                let shape = layer.weight_shape();
                let seed = (c_out * 100 + c_in * 10 + k) as u64;
                let w = random(&shape.dims(), &[4, seed]);
                let x = random(&[2, 5, 5, c_in], &[5, seed]);
                for g in [1, 2] {
                    let svd_max = LayerTDConfig::max_rank(TdFormat::Svd, g, g, shape);
                    let mut cfgs: Vec<LayerTDConfig> = [1, svd_max.div_ceil(2), svd_max]
                        .map(|r| LayerTDConfig::svd(g, g, r))
                        .to_vec();
                    cfgs.extend([1, 3, 6].map(|r| LayerTDConfig::cpd(g, g, r)));
                    for cfg in cfgs {
                        let d = decompose_layer(&w, &cfg, &AlsSettings::with_seed(seed)).unwrap();
                        let oracle = naive_conv(&x, &reconstruct_layer(&d), k / 2);
                        let staged = decomposed_conv_forward(&x, layer, &d).unwrap();
                        let err = staged.distance(&oracle).unwrap() / oracle.frobenius_norm();
                        worst = worst.max(err);
                        cases += 1;
                    }
                }
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(
        3,
        worst <= 1e-6 && secs < 120.0,
        format!("{cases} layer configs, max relative deviation {worst:.2e}, {secs:.1}s"),
    );
}

#[test]
fn c04_counting_on_resnet18() {
    let _serial = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let net = resnet18_shapes().unwrap();
    let td = resnet18_td().unwrap();
    let within = |v: f64, target: f64, tol: f64| (v - target).abs() / target <= tol;
    let mb32 = count_memory_bits(&net, None, 32) as f64 / 1e6;
    let mb8 = count_memory_bits(&net, None, 8) as f64 / 1e6;
    let g32 = count_bitops(&net, None, 32, 32) as f64 / 1e9;
    let g8 = count_bitops(&net, None, 8, 8) as f64 / 1e9;
    let td_mb = count_memory_bits(&net, Some(&td), 8) as f64 / 1e6;
    let td_g = count_bitops(&net, Some(&td), 8, 8) as f64 / 1e9;
    let secs = t.elapsed().as_secs_f64();
    let ok = within(mb32, 374.0, 0.01)
        && within(mb8, 94.0, 0.01)
        && within(g32, 3715.0, 0.02)
        && within(g8, 232.0, 0.02)
        && within(td_mb, 35.0, 0.10)
        && within(td_g, 97.0, 0.10)
        && secs < 10.0;
    verdict(
        4,
        ok,
        format!(
            "{mb32:.2}/{mb8:.2} Mb, {g32:.1}/{g8:.1} G dense; {td_mb:.2} Mb, {td_g:.2} G decomposed; {secs:.2}s"
        ),
    );
}

/// Branch-and-bound over every divisor pair of every stage.
fn exhaustive_fps(d0: &PipelineDesign) -> f64 {
    type Opt = (u64, ResourceVector);
    let p = d0.platform.clone();
    let opts: Vec<Vec<Opt>> = d0
        .units()
        .into_iter()
        .map(|u| {
            let s = d0.stage(u);
            let n = d0.layers[u.0].count() as u64;
            let base = s.resources(&p).scaled(n);
            let mut v = Vec::new();
            for pi in divisors(s.reduce_size) {
                for po in divisors(s.expand_size) {
                    let t = StageModel {
                        p_in: pi,
                        p_out: po,
                        ..s.clone()
                    };
                    v.push((t.cycles(), t.resources(&p).scaled(n) - base));
                }
            }
            v.sort_by_key(|o| o.0);
            v
        })
        .collect();
    fn rec(
        i: usize,
        opts: &[Vec<Opt>],
        used: ResourceVector,
        budget: &ResourceVector,
        cur: u64,
        best: &mut u64,
    ) {
        if cur >= *best {
            return;
        }
        if i == opts.len() {
            *best = cur;
            return;
        }
        for o in &opts[i] {
            let u = used + o.1;
            if u.fits(budget) {
                rec(i + 1, opts, u, budget, cur.max(o.0), best);
            }
        }
    }
    let mut best = u64::MAX;
    rec(0, &opts, d0.resources(), &p.budget, 0, &mut best);
    p.clock_hz() / best as f64
}

#[test]
fn c05_greedy_allocation_vs_exhaustive() {
    let _serial = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let net = tiny_cnn(0).unwrap();
    let choices = ChoiceSets::from_spec(&net, &ChoiceSpec::default()).unwrap();
    let mut rng = stream(&[6]);
    let (mut worst, mut cases, mut over) = (f64::INFINITY, 0, 0);
    for dsp in [32u64, 64, 128, 256] {
        let plat = Platform::default().with_budget(ResourceVector::new(dsp, 200, 100_000, 0));
        for i in 0..12 {
            let td = (i > 0).then(|| random_design(&choices, &mut rng).td(&net));
            let Ok(d) = allocate_unrolling(&net, td.as_ref(), &plat) else {
                continue;
            };
            let ex = exhaustive_fps(&PipelineDesign::new(&net, td.as_ref(), &plat).unwrap());
            worst = worst.min(d.metrics().fps_peak / ex);
            over += usize::from(!d.resources().fits(&plat.budget));
            cases += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(
        5,
        cases > 0 && worst >= 0.9 && over == 0 && secs < 300.0,
        format!(
            "{cases} designs, worst greedy/exhaustive {worst:.3}, {over} over budget, {secs:.1}s"
        ),
    );
}

#[test]
fn c06_rearrangement_schedule() {
    let _serial = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let (mut checked, mut bad) = (0, 0);
    for c in 1..=96 {
        for g1 in divisors(c).into_iter().filter(|&g| g <= 16) {
            for g2 in divisors(c).into_iter().filter(|&g| g <= 16) {
                let fwd = rearrange_schedule(c, g1, g2).unwrap();
                let back = rearrange_schedule(c, g2, g1).unwrap();
                let mut seen = vec![false; c];
                fwd.iter().for_each(|&i| seen[i] = true);
                let bijective = fwd.len() == c && seen.iter().all(|&s| s);
                let round_trip = (0..c).all(|t| fwd[back[t]] == t);
                let width = (1..).find(|w| w % g1 == 0 && w % g2 == 0).unwrap();
                if !(bijective && round_trip && lcm_fifo_width(g1, g2) == width) {
                    bad += 1;
                }
                checked += 1;
            }
        }
    }
    verdict(
        6,
        bad == 0,
        format!("{checked} (c, g1, g2) triples, {bad} failures"),
    );
}

#[test]
fn c07_search_contract() {
    let _serial = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let net = tiny_cnn(0).unwrap();
    let probe = ProbeSet::reconstruction();
    let plat = desk_platform();
    let ctx = SearchContext::new(&net, &probe, plat.clone(), 1, AlsSettings::default()).unwrap();
    let choices = ChoiceSets::from_spec(&net, &ChoiceSpec::default()).unwrap();
    let cfg = SearchConfig {
        max_steps: 20,
        fps_target: 80_000.0,
        seed: 11,
        ..SearchConfig::default()
    };
    let a = search(&ctx, &choices, &cfg).unwrap();
    let b = search(&ctx, &choices, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (pa, pb) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    write_search_log(&pa, &a.log).unwrap();
    write_search_log(&pb, &b.log).unwrap();
    let identical = std::fs::read(&pa).unwrap() == std::fs::read(&pb).unwrap();
    let mut violations = 0;
    for d in &a.population {
        let p = allocate_unrolling(&net, Some(&d.td(&net)), &plat).unwrap();
        if p.fps(1) < cfg.fps_target || !p.resources().fits(&plat.budget) {
            violations += 1;
        }
    }
    let monotone = a
        .steps
        .windows(2)
        .all(|w| w[1].best_accuracy >= w[0].best_accuracy);
    let secs = t.elapsed().as_secs_f64();
    verdict(
        7,
        violations == 0 && monotone && identical && !a.population.is_empty() && secs < 600.0,
        format!(
            "{} designs returned, {violations} violations, monotone {monotone}, identical logs {identical}, {secs:.1}s",
            a.population.len()
        ),
    );
}

fn pair_net() -> NetworkSpec {
    let (hw, c) = (16, 8);
    let decls = [
        LayerDecl::conv("a", c, 2 * c, 3, 1, 1),
        LayerDecl::new("r", LayerKind::Relu),
        LayerDecl::conv("b", 2 * c, c, 3, 1, 1),
    ];
    let shapes = NetworkSpec::build("pair", [1, hw, hw, c], &decls, BTreeMap::new()).unwrap();
    let mut rng = stream(&[3]);
    let mut weights = BTreeMap::new();
    for l in shapes.layers.iter().filter(|l| l.is_decomposable()) {
        let mut w = network::LayerWeights::neutral(l).unwrap();
        w.weight =
            DenseTensor::random_uniform(&l.weight_shape().dims(), -1.0, 1.0, &mut rng).unwrap();
        weights.insert(l.id.clone(), w);
    }
    NetworkSpec::build("pair", [1, hw, hw, c], &decls, weights).unwrap()
}

#[test]
fn c08_search_finds_enumerated_optimum() {
    let _serial = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let net = pair_net();
    let probe = ProbeSet::reconstruction();
    let plat = Platform::default().with_budget(ResourceVector::new(32, 100, 100_000, 0));
    let ctx = SearchContext::new(&net, &probe, plat, 1, AlsSettings::default()).unwrap();
    let sets = |mode| {
        ChoiceSets::from_spec(
            &net,
            &ChoiceSpec {
                mode,
                ..ChoiceSpec::default()
            },
        )
        .unwrap()
    };
    let enumerate = |choices: &ChoiceSets| -> Vec<DesignPoint> {
        let mut all = Vec::new();
        for a in &choices.sets[0] {
            for b in &choices.sets[1] {
                let mut d = DesignPoint::new(vec![*a, *b]);
                validate(&ctx, &mut d, &Evaluator::Exact, 0.0).unwrap();
                all.push(d);
            }
        }
        all
    };
    let mixed = enumerate(&sets(FormatMode::Mixed));
    let mut fps: Vec<f64> = mixed
        .iter()
        .map(DesignPoint::fps)
        .filter(|&f| f > 0.0)
        .collect();
    fps.sort_by(f64::total_cmp);
    let target = fps[fps.len() * 3 / 4];

    let mut optima = BTreeMap::new();
    let mut ok = true;
    let mut details = Vec::new();
    let seeds = 0..5u64;
    for mode in [FormatMode::SvdOnly, FormatMode::CpdOnly, FormatMode::Mixed] {
        let choices = sets(mode);
        let space = enumerate(&choices);
        assert!(space.len() <= 10_000);
        let best = space
            .iter()
            .filter(|d| d.fps() >= target && d.cached.as_ref().unwrap().valid)
            .map(DesignPoint::accuracy)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut hits = 0;
        for seed in seeds.clone() {
            let cfg = SearchConfig {
                max_steps: 50,
                fps_target: target,
                seed,
                ..SearchConfig::default()
            };
            let r = search(&ctx, &choices, &cfg).unwrap();
            if r.population.first().map(DesignPoint::accuracy) == Some(best) {
                hits += 1;
            }
        }
        ok &= hits == seeds.end;
        details.push(format!(
            "{} {hits}/{} (space {})",
            mode.name(),
            seeds.end,
            space.len()
        ));
        optima.insert(mode.name(), best);
    }
    let superset = optima["mixed"] >= optima["svd-only"] && optima["mixed"] >= optima["cpd-only"];
    verdict(
        8,
        ok && superset,
        format!(
            "target {target:.0} fps; {}; mixed optimum {:.6} vs svd {:.6}, cpd {:.6}",
            details.join(", "),
            optima["mixed"],
            optima["svd-only"],
            optima["cpd-only"]
        ),
    );
}

#[test]
fn c09_surrogate_accuracy() {
    let _serial = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let net = tiny_cnn(0).unwrap();
    let probe = ProbeSet::reconstruction();
    let ctx = SearchContext::new(&net, &probe, desk_platform(), 1, AlsSettings::default()).unwrap();
    let choices = ChoiceSets::from_spec(&net, &ChoiceSpec::default()).unwrap();
    let mut rng = stream(&[9]);
    let (mut x, mut y) = (Vec::new(), Vec::new());
    while y.len() < 500 {
        let d = random_design(&choices, &mut rng);
        if let Some((fps, _)) = ctx.exact_throughput(&d).unwrap() {
            x.push(ctx.features(&d));
            y.push(fps);
        }
    }
    let (train, test) = holdout_split(y.len(), 0.2, 7);
    let pick = |rows: &[usize]| -> (Vec<Vec<f64>>, Vec<f64>) {
        rows.iter().map(|&r| (x[r].clone(), y[r])).unzip()
    };
    let ((tx, ty), (hx, hy)) = (pick(&train), pick(&test));
    let forest = RandomForestModel::fit(&tx, &ty, &ForestParams::default()).unwrap();
    let rf = score(&forest.predict_batch(&hx).unwrap(), &hy).median_relative_error;
    let mac = MacBaseline::fit(&tx, &ty, total_macs_index(choices.layers.len())).unwrap();
    let base =
        score(&hx.iter().map(|r| mac.predict(r)).collect::<Vec<_>>(), &hy).median_relative_error;
    let secs = t.elapsed().as_secs_f64();
    verdict(
        9,
        rf <= 0.15 && base > rf && secs < 900.0,
        format!(
            "{} train / {} holdout rows, forest median error {rf:.3}, MAC baseline {base:.3}, {secs:.1}s",
            train.len(),
            test.len()
        ),
    );
}

fn designs_per_second(r: &SearchResult, from_step: usize) -> f64 {
    let start = r.steps[from_step - 1].wall_seconds;
    let rows = &r.steps[from_step..];
    let evaluated: usize = rows.iter().map(|s| s.evaluated).sum();
    let train: f64 = rows.iter().map(|s| s.train_seconds).sum();
    let elapsed = r.steps.last().unwrap().wall_seconds - start - train;
    evaluated as f64 / elapsed.max(1e-9)
}

#[test]
fn c10_surrogate_search_speedup() {
    let _serial = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let net = resnet18_shapes().unwrap();
    let probe = ProbeSet::reconstruction();
    let ctx =
        SearchContext::new(&net, &probe, Platform::default(), 1, AlsSettings::default()).unwrap();
    let choices = ChoiceSets::from_spec(&net, &ChoiceSpec::default()).unwrap();
    let base = SearchConfig {
        max_steps: 30,
        fps_target: 300.0,
        seed: 1,
        ..SearchConfig::default()
    };
    let exact = search(&ctx, &choices, &base).unwrap();
    let surrogate = search(
        &ctx,
        &choices,
        &SearchConfig {
            evaluator: ThroughputSource::Surrogate,
            ..base.clone()
        },
    )
    .unwrap();
    let Some(h) = surrogate.handoff_step.filter(|&h| h < base.max_steps) else {
        verdict(10, false, "the predictor never passed its gate".into());
        return;
    };
    let exact_rate = designs_per_second(&exact, 1);
    let surrogate_rate = designs_per_second(&surrogate, h + 1);
    let ratio = surrogate_rate / exact_rate;
    verdict(
        10,
        ratio >= 50.0,
        format!(
            "exact {exact_rate:.0} designs/s, surrogate {surrogate_rate:.0} designs/s after step {h}, ratio {ratio:.1}"
        ),
    );
}
