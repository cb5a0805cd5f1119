use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use mixtd_core::dse::{write_population, write_search_log, write_steps};
use mixtd_core::network::{save_decomposed, save_td_config};
use mixtd_core::*;
use rayon::prelude::*;

use crate::{inputs, ModelArgs, PlatformArgs, SearchArgs};

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn megabits(params: u64) -> f64 {
    params as f64 * 8.0 / 1e6
}

/// Layers whose weights are all zero (shape-only models) are counted but not
/// factorized and get no blob.
pub fn decompose(m: &ModelArgs, td_config: &str, out: &Path) -> Result<()> {
    let net = inputs::model(&m.model)?;
    let td = inputs::td_config(td_config)?;
    net.check_td(&td)?;
    let als = AlsSettings::with_seed(m.seed);
    let idx = net.decomposable();
    let fitted = idx
        .par_iter()
        .map(|&i| {
            let l = &net.layers[i];
            let w = &net.weights[&l.id].weight;
            if w.data().iter().all(|&v| v == 0.0) {
                return Ok(None);
            }
            let d = decompose_layer(w, &td[&l.id], &als.for_layer(i))?;
            let e = relative_error(&d, w)?.value;
            Ok(Some((d, e)))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut table = String::from(
        "layer,format,g1,g2,rank,dense_params,params,compression,relative_error,note\n",
    );
    let mut blobs = BTreeMap::new();
    for (&i, fit) in idx.iter().zip(fitted) {
        let l = &net.layers[i];
        let cfg = td[&l.id];
        let (dense, params) = (l.params(None), l.params(Some(&cfg)));
        let (error, note) = match &fit {
            Some((_, e)) => (format!("{e:.3e}"), ""),
            None => (String::new(), "no-weights"),
        };
        let note = if params > dense { "expansion" } else { note };
        let _ = writeln!(
            table,
            "{},{},{},{},{},{dense},{params},{:.4},{error},{note}",
            l.id,
            cfg.format.name(),
            cfg.g1,
            cfg.g2,
            cfg.rank,
            dense as f64 / params as f64,
        );
        if let Some((d, _)) = fit {
            blobs.insert(l.id.clone(), d);
        }
    }
    let (dense, params) = (net.count_params(None), net.count_params(Some(&td)));
    let _ = writeln!(
        table,
        "total,,,,,{dense},{params},{:.4},,",
        dense as f64 / params as f64
    );
    create_dir(out)?;
    let index = save_decomposed(out, &m.model, &blobs)?;
    write(&out.join("decompose.csv"), &table)?;
    print!("{table}");
    println!(
        "memory at 8 bits: {:.2} Mb dense, {:.2} Mb decomposed",
        megabits(dense),
        megabits(params)
    );
    println!(
        "wrote {} layer blobs, index {}",
        blobs.len(),
        index.display()
    );
    Ok(())
}

/// Allocation report; with a probe also the proxy accuracy.
pub fn evaluate(
    m: &ModelArgs,
    p: &PlatformArgs,
    td_config: Option<&str>,
    probe: Option<&str>,
) -> Result<()> {
    let net = inputs::model(&m.model)?;
    let platform = inputs::platform(&p.platform)?;
    platform.validate()?;
    let td = td_config.map(inputs::td_config).transpose()?;
    if let Some(td) = &td {
        net.check_td(td)?;
    }
    let design = allocate_unrolling(&net, td.as_ref(), &platform)?;
    print!("{}", design.report(p.batch.max(1)));
    println!("params\t{}", net.count_params(td.as_ref()));
    println!(
        "memory_mb_8bit\t{:.3}",
        megabits(net.count_params(td.as_ref()))
    );
    if let Some(probe) = probe {
        let probe = inputs::probe(probe, &net, m.seed)?;
        let proxy = AccuracyProxy::new(&net, &probe, AlsSettings::with_seed(m.seed))?;
        let acc = proxy.evaluate(&td.unwrap_or_default())?;
        println!("proxy_accuracy\t{acc:.6}");
    }
    Ok(())
}

/// Highest throughput any design in `choices` could reach, from the smallest
/// full-unroll initiation interval each layer admits.
fn fps_ceiling(net: &NetworkSpec, choices: &ChoiceSets, platform: &Platform) -> Result<f64> {
    let longest = |stages: Vec<StageModel>| stages.iter().map(|s| s.spatial_positions).max();
    let mut ii = 1;
    for (i, l) in net.layers.iter().enumerate() {
        let floor = match choices.layers.iter().position(|&j| j == i) {
            Some(k) => choices.sets[k]
                .iter()
                .map(|c| Ok(longest(build_stages(l, Some(c))?)))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .flatten()
                .min(),
            None => longest(build_stages(l, None)?),
        };
        ii = ii.max(floor.unwrap_or(1));
    }
    Ok(platform.clock_hz() / ii as f64)
}

pub fn search(a: &SearchArgs) -> Result<()> {
    let m = &a.model;
    let net = inputs::model(&m.model)?;
    let platform = inputs::platform(&a.platform.platform)?;
    let probe = inputs::probe(&a.probe, &net, m.seed)?;
    let choices = ChoiceSets::from_spec(
        &net,
        &ChoiceSpec {
            mode: a.format_mode,
            groups: a.groups.clone(),
            rank_fractions: a.rank_fractions.clone(),
        },
    )?;
    let ceiling = fps_ceiling(&net, &choices, &platform)?;
    if a.fps_target > ceiling {
        return Err(Error::Infeasible(format!(
            "fps_target {:.3} exceeds {ceiling:.3}, the clock over the smallest reachable initiation interval",
            a.fps_target
        )));
    }
    let cfg = SearchConfig {
        population: a.population,
        children: a.children,
        max_steps: a.steps,
        fps_target: a.fps_target,
        seed: m.seed,
        surrogate_start_step: a.surrogate_start,
        evaluator: a.evaluator,
        ..SearchConfig::default()
    };
    let ctx = SearchContext::new(
        &net,
        &probe,
        platform,
        a.platform.batch,
        AlsSettings::with_seed(m.seed),
    )?;
    let r = mixtd_core::search(&ctx, &choices, &cfg)?;

    let out = &a.out;
    create_dir(out)?;
    write_population(out.join("population.json"), &ctx, &r.population)?;
    write_search_log(out.join("log.csv"), &r.log)?;
    write_steps(out.join("steps.csv"), a.format_mode.name(), &r.steps)?;
    r.dataset.save_csv(out.join("dataset.csv"))?;
    if let Some(model) = &r.model {
        model.save(out.join("model.json"))?;
    }
    let Some(best) = r.population.first() else {
        return Err(Error::Infeasible(
            "no design survived the final exact re-validation".into(),
        ));
    };
    save_td_config(out.join("best.toml"), &best.td(&net))?;
    println!(
        "space size {}, {} candidates evaluated, handoff {}",
        choices.size(),
        r.log.len(),
        r.handoff_step
            .map_or("none".to_string(), |s| format!("at step {s}"))
    );
    println!(
        "best {}: proxy accuracy {:.6}, {:.3} fps, {} params (compression {:.2}x)",
        best.hash(),
        best.accuracy(),
        best.fps(),
        net.count_params(Some(&best.td(&net))),
        net.count_params(None) as f64 / net.count_params(Some(&best.td(&net))) as f64
    );
    Ok(())
}
