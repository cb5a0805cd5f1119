use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mixtd_core::fixtures::{desk_platform, tiny_cnn};
use mixtd_core::network::save_td_config;
use mixtd_core::*;
use tempfile::TempDir;

fn mixtd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixtd"))
        .args(args)
        .output()
        .expect("spawn mixtd")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(args: &[&str]) -> String {
    let o = mixtd(args);
    assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    stdout(&o)
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// `key\tvalue` line of an allocation report.
fn field(report: &str, key: &str) -> f64 {
    report
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key}\t")))
        .unwrap_or_else(|| panic!("no {key} in\n{report}"))
        .parse()
        .unwrap()
}

fn full_rank_svd(net: &NetworkSpec) -> TdMap {
    net.decomposable()
        .iter()
        .map(|&i| {
            let l = &net.layers[i];
            let r = LayerTDConfig::max_rank(TdFormat::Svd, 1, 1, l.weight_shape());
            (l.id.clone(), LayerTDConfig::svd(1, 1, r))
        })
        .collect()
}

#[test]
fn decompose_full_rank_tiny_cnn() {
    let dir = TempDir::new().unwrap();
    let net = tiny_cnn(0).unwrap();
    let td = full_rank_svd(&net);
    let cfg = dir.path().join("full.toml");
    save_td_config(&cfg, &td).unwrap();
    let out = dir.path().join("out");
    let text = ok(&["decompose", "--td-config", path(&cfg), "--out", path(&out)]);
    let rows: Vec<Vec<&str>> = text
        .lines()
        .skip(1)
        .take(3)
        .map(|l| l.split(',').collect())
        .collect();
    for row in &rows {
        let (dense, params): (usize, usize) = (row[5].parse().unwrap(), row[6].parse().unwrap());
        let l = net.layer(row[0]).unwrap();
        assert_eq!(dense, l.params(None));
        assert_eq!(params, l.params(Some(&td[row[0]])));
        assert!(row[8].parse::<f64>().unwrap() <= 1e-6);
        assert_eq!(row[9] == "expansion", params > dense, "{row:?}");
        let blob = fs::metadata(out.join(format!("{}.td.bin", row[0]))).unwrap();
        assert_eq!(blob.len() as usize, 4 * params);
    }
    assert!(rows.iter().any(|r| r[9] == "expansion"));
    assert_eq!(
        fs::read_to_string(out.join("decompose.csv")).unwrap(),
        text.split("memory").next().unwrap()
    );
    assert!(out.join("decomposed.toml").exists());
}

#[test]
fn decompose_resnet18_fixture_config_reaches_35_mb() {
    let dir = TempDir::new().unwrap();
    let text = ok(&[
        "decompose",
        "--model",
        "resnet18-shapes",
        "--td-config",
        "resnet18-td",
        "--out",
        path(dir.path()),
    ]);
    let line = text
        .lines()
        .find(|l| l.starts_with("memory at 8 bits"))
        .unwrap();
    let mb: Vec<f64> = line
        .split_whitespace()
        .filter_map(|w| w.parse().ok())
        .collect();
    let net = fixtures::resnet18_shapes().unwrap();
    let td = fixtures::resnet18_td().unwrap();
    assert_eq!(mb[1], 93.52);
    assert!((mb[2] - count_memory_bits(&net, Some(&td), 8) as f64 / 1e6).abs() < 0.005);
    assert!((mb[2] - 35.0).abs() / 35.0 <= 0.10, "{line}");
}

#[test]
fn decompose_names_missing_layer() {
    let dir = TempDir::new().unwrap();
    let net = tiny_cnn(0).unwrap();
    let mut td = full_rank_svd(&net);
    td.remove("conv2");
    let cfg = dir.path().join("partial.toml");
    save_td_config(&cfg, &td).unwrap();
    let o = mixtd(&[
        "decompose",
        "--td-config",
        path(&cfg),
        "--out",
        path(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("`conv2`"), "{}", stderr(&o));
}

#[test]
fn unlimited_budget_peak_is_clock_over_positions() {
    let net = tiny_cnn(0).unwrap();
    let text = ok(&["allocate", "--platform", "unlimited"]);
    let positions = net
        .layers
        .iter()
        .map(|l| l.input_positions().max(l.output_positions()))
        .max()
        .unwrap();
    assert_eq!(field(&text, "fps_peak"), 200e6 / positions as f64);
}

#[test]
fn doubling_clock_doubles_reported_fps() {
    let dir = TempDir::new().unwrap();
    let slow = dir.path().join("slow.toml");
    let fast = dir.path().join("fast.toml");
    let p = desk_platform();
    p.save(&slow).unwrap();
    Platform {
        clock_mhz: 2.0 * p.clock_mhz,
        ..p
    }
    .save(&fast)
    .unwrap();
    let a = ok(&["evaluate", "--platform", path(&slow)]);
    let b = ok(&["evaluate", "--platform", path(&fast)]);
    for key in ["fps_batch1", "fps_peak"] {
        let (x, y) = (field(&a, key), field(&b, key));
        assert!((y / x - 2.0).abs() < 1e-6, "{key}: {x} {y}");
    }
    assert_eq!(field(&a, "proxy_accuracy"), 1.0);
}

#[test]
fn report_totals_equal_engine_rows() {
    let text = ok(&["allocate", "--platform", "desk", "--batch", "4"]);
    let mut sums = [0u64; 4];
    for line in text.lines().skip(1).take_while(|l| !l.starts_with("total")) {
        let cols: Vec<&str> = line.split('\t').collect();
        for (s, c) in sums.iter_mut().zip(&cols[10..14]) {
            *s += c.parse::<u64>().unwrap();
        }
    }
    let total: Vec<u64> = text
        .lines()
        .find(|l| l.starts_with("total"))
        .unwrap()
        .split('\t')
        .skip(10)
        .map(|c| c.parse().unwrap())
        .collect();
    assert_eq!(total, sums);
    assert!(field(&text, "fps_batch4") > field(&text, "fps_batch1"));
}

#[test]
fn infeasible_budget_exits_with_infeasible_code() {
    let dir = TempDir::new().unwrap();
    let p = dir.path().join("small.toml");
    Platform::default()
        .with_budget(ResourceVector::new(1, 1, 1000, 0))
        .save(&p)
        .unwrap();
    let o = mixtd(&["evaluate", "--platform", path(&p)]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let o = mixtd(&["evaluate", "--platform", "/nonexistent/platform.toml"]);
    assert_eq!(o.status.code(), Some(4));
    let o = mixtd(&["search", "--evaluator", "oracle", "--out", path(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
}

fn search(dir: &Path, target: &str, extra: &[&str]) -> String {
    let mut args = vec![
        "search",
        "--platform",
        "desk",
        "--fps-target",
        target,
        "--out",
        path(dir),
    ];
    args.extend_from_slice(extra);
    ok(&args)
}

#[test]
fn fixed_seed_gives_identical_files() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    search(
        &a,
        "80000",
        &["--seed", "5", "--steps", "6", "--workers", "1"],
    );
    search(
        &b,
        "80000",
        &["--seed", "5", "--steps", "6", "--workers", "4"],
    );
    for f in ["log.csv", "population.json", "dataset.csv", "best.toml"] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn unreachable_target_prints_diagnostic() {
    let dir = TempDir::new().unwrap();
    let o = mixtd(&[
        "search",
        "--platform",
        "unlimited",
        "--fps-target",
        "1e7",
        "--out",
        path(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("fps_target"), "{}", stderr(&o));
}

const SMALL_SPACE: [&str; 4] = ["--groups", "1,2", "--rank-fractions", "0.125,0.25,0.5,1"];

/// Every design ranked by proxy accuracy; the first one meeting the target
/// under the exact allocator is the optimum.
fn enumeration_optimum(target: f64, seed: u64) -> f64 {
    let net = tiny_cnn(0).unwrap();
    let probe = ProbeSet::reconstruction();
    let ctx = SearchContext::new(
        &net,
        &probe,
        desk_platform(),
        1,
        AlsSettings::with_seed(seed),
    )
    .unwrap();
    let spec = ChoiceSpec {
        groups: vec![1, 2],
        rank_fractions: vec![0.125, 0.25, 0.5, 1.0],
        ..ChoiceSpec::default()
    };
    let choices = ChoiceSets::from_spec(&net, &spec).unwrap();
    let mut all: Vec<Vec<LayerTDConfig>> = vec![vec![]];
    for set in &choices.sets {
        all = all
            .into_iter()
            .flat_map(|p| {
                set.iter().map(move |g| {
                    let mut q = p.clone();
                    q.push(*g);
                    q
                })
            })
            .collect();
    }
    assert_eq!(all.len(), 14_400);
    let mut scored: Vec<(f64, DesignPoint)> = all
        .into_iter()
        .map(|g| {
            let d = DesignPoint::new(g);
            (ctx.accuracy(&d).unwrap(), d)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    scored
        .into_iter()
        .find(|(_, d)| {
            ctx.exact_throughput(d)
                .unwrap()
                .is_some_and(|(fps, _)| fps >= target)
        })
        .unwrap()
        .0
}

fn best_accuracy(dir: &Path) -> f64 {
    let pop: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("population.json")).unwrap()).unwrap();
    pop[0]["accuracy"].as_f64().unwrap()
}

#[test]
fn tiny_search_finds_enumeration_optimum() {
    let dir = TempDir::new().unwrap();
    for seed in 0..10u64 {
        let out = dir.path().join(seed.to_string());
        let s = seed.to_string();
        let mut args = vec!["--seed", s.as_str(), "--steps", "50"];
        args.extend(SMALL_SPACE);
        search(&out, "250000", &args);
        let found = best_accuracy(&out);
        let optimum = enumeration_optimum(250_000.0, seed);
        assert!(optimum < 0.95);
        assert!(
            (found - optimum).abs() <= 1e-12,
            "seed {seed}: {found} vs {optimum}"
        );
    }
}

#[test]
fn empty_log_gives_empty_tables() {
    let dir = TempDir::new().unwrap();
    let log = dir.path().join("steps.csv");
    fs::write(&log, "").unwrap();
    let out = dir.path().join("tables");
    ok(&["report", path(&log), "--out", path(&out)]);
    for (name, header) in [
        (
            "accuracy_vs_time.csv",
            "method,step,wall_seconds,best_accuracy\n",
        ),
        (
            "designs_per_hour.csv",
            "method,evaluator,designs,seconds,designs_per_hour\n",
        ),
        (
            "compression.csv",
            "population,rank,hash,params,dense_params,compression,accuracy,fps\n",
        ),
    ] {
        assert_eq!(fs::read_to_string(out.join(name)).unwrap(), header);
    }
}

#[test]
fn malformed_log_reports_line_number() {
    let dir = TempDir::new().unwrap();
    let log = dir.path().join("steps.csv");
    fs::write(
        &log,
        "method,step,evaluator,best_accuracy,median_accuracy,evaluated,accepted,wall_seconds,train_seconds\n\
         mixed,0,exact,0.5,0.4,40,32,1.0,0.0\n\
         mixed,1,exact,0.6,0.5,3x,16,2.0,0.0\n",
    )
    .unwrap();
    let o = mixtd(&["report", path(&log)]);
    assert_eq!(o.status.code(), Some(5));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
    fs::write(&log, "step,candidate\n0,1\n").unwrap();
    let o = mixtd(&["report", path(&log)]);
    assert_eq!(o.status.code(), Some(5));
    assert!(stderr(&o).contains("line 1"), "{}", stderr(&o));
}

#[test]
fn designs_per_hour_is_rows_over_elapsed() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("run");
    search(
        &out,
        "80000",
        &["--seed", "2", "--steps", "8", "--evaluator", "surrogate"],
    );
    let log = fs::read_to_string(out.join("log.csv")).unwrap();
    let steps = fs::read_to_string(out.join("steps.csv")).unwrap();
    let mut rows: Vec<(String, usize, f64)> = Vec::new();
    let mut prev = 0.0;
    for line in steps.lines().skip(1) {
        let c: Vec<&str> = line.split(',').collect();
        let (step, wall): (usize, f64) = (c[1].parse().unwrap(), c[7].parse().unwrap());
        let n = log
            .lines()
            .skip(1)
            .filter(|l| l.split(',').next().unwrap().parse::<usize>().unwrap() == step)
            .count();
        match rows.iter_mut().find(|r| r.0 == c[2]) {
            Some(r) => {
                r.1 += n;
                r.2 += wall - prev;
            }
            None => rows.push((c[2].to_string(), n, wall - prev)),
        }
        prev = wall;
    }
    let text = ok(&["report", path(&out.join("steps.csv"))]);
    let table: Vec<Vec<&str>> = text
        .split("# designs_per_hour.csv\n")
        .nth(1)
        .unwrap()
        .lines()
        .skip(1)
        .take_while(|l| !l.is_empty())
        .map(|l| l.split(',').collect())
        .collect();
    assert_eq!(table.len(), rows.len());
    for (t, (evaluator, n, secs)) in table.iter().zip(&rows) {
        assert_eq!(t[1], evaluator);
        assert_eq!(t[2].parse::<usize>().unwrap(), *n);
        let rate: f64 = t[4].parse().unwrap();
        let expected = *n as f64 / secs * 3600.0;
        assert!(
            (rate - expected).abs() <= 1e-3 * expected + 0.1,
            "{rate} vs {expected}"
        );
    }
}

#[test]
fn mixed_search_overtakes_single_format_modes() {
    let dir = TempDir::new().unwrap();
    let mut logs = Vec::new();
    let mut pops = Vec::new();
    for mode in ["svd-only", "cpd-only", "mixed"] {
        let out = dir.path().join(mode);
        search(
            &out,
            "300000",
            &["--seed", "0", "--steps", "30", "--format-mode", mode],
        );
        logs.push(out.join("steps.csv"));
        pops.push(out.join("population.json"));
    }
    let tables = dir.path().join("tables");
    let mut args = vec!["report", "--model", "tiny-cnn", "--out", path(&tables)];
    args.extend(logs.iter().map(|p| path(p)));
    for p in &pops {
        args.extend(["--population", path(p)]);
    }
    ok(&args);
    let curve = fs::read_to_string(tables.join("accuracy_vs_time.csv")).unwrap();
    let last = |mode: &str| -> f64 {
        curve
            .lines()
            .rfind(|l| l.starts_with(&format!("{mode},")))
            .unwrap()
            .rsplit(',')
            .next()
            .unwrap()
            .parse()
            .unwrap()
    };
    let (svd, cpd, mixed) = (last("svd-only"), last("cpd-only"), last("mixed"));
    assert!(
        mixed > svd && mixed > cpd,
        "mixed {mixed}, svd {svd}, cpd {cpd}"
    );
    let compression = fs::read_to_string(tables.join("compression.csv")).unwrap();
    assert_eq!(compression.lines().count(), 4);
    for line in compression.lines().skip(1) {
        let c: Vec<&str> = line.split(',').collect();
        let (params, dense): (f64, f64) = (c[3].parse().unwrap(), c[4].parse().unwrap());
        assert_eq!(dense, 2520.0);
        assert!((c[5].parse::<f64>().unwrap() - dense / params).abs() < 1e-4);
    }
}
