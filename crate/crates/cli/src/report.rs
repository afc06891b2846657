//! Cross-run summaries built only from artifacts listed in run manifests.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use dlatent::transfer::{render_table, EvalReport};

use crate::commands::RetrievalOutput;
use crate::error::{CliError, Result};
use crate::run::{RunManifest, MANIFEST_FILE};
use crate::ReportArgs;

struct RunSummary {
    name: String,
    method: String,
    layout: String,
    m: String,
    k: String,
    eval: Option<EvalReport>,
    retrieval: Option<RetrievalOutput>,
}

fn artifact(dir: &Path, manifest: &RunManifest, stage: &str, output: &str) -> Option<PathBuf> {
    let rel = manifest.stages.get(stage)?.outputs.get(output)?;
    let p = dir.join(rel);
    p.exists().then_some(p)
}

fn load_run(dir: &Path) -> Result<Option<RunSummary>> {
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| CliError::io(&manifest_path, e))?;
    let manifest: RunManifest = serde_json::from_str(&text)?;
    let cfg = manifest.stages.get("pretrain").map(|s| &s.config);
    let get = |key: &str| cfg.and_then(|c| c.get(key)).cloned().unwrap_or_else(|| "-".into());
    let eval = match artifact(dir, &manifest, "classify", "report") {
        Some(p) => Some(EvalReport::from_json(
            &std::fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))?,
        )?),
        None => None,
    };
    let retrieval = match artifact(dir, &manifest, "retrieve", "report") {
        Some(p) => Some(serde_json::from_str(
            &std::fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))?,
        )?),
        None => None,
    };
    Ok(Some(RunSummary {
        name: manifest.run.clone(),
        method: get("method"),
        layout: get("layout"),
        m: get("m"),
        k: get("k"),
        eval,
        retrieval,
    }))
}

fn pct(x: f64) -> String {
    format!("{:.1}", 100.0 * x)
}

fn transfer_table(runs: &[RunSummary]) -> String {
    let sizes: BTreeSet<_> = runs
        .iter()
        .filter_map(|r| r.eval.as_ref())
        .flat_map(|e| e.rows.iter().map(|row| row.n))
        .collect();
    let mut header = vec!["run".to_owned(), "method".into(), "layout".into(), "M".into(), "K".into(), "setting".into()];
    header.extend(sizes.iter().map(|n| n.to_string()));
    let mut grid = vec![header];
    for r in runs {
        let Some(eval) = &r.eval else { continue };
        let settings: BTreeSet<_> = eval.rows.iter().map(|row| row.setting).collect();
        for setting in settings {
            let mut line = vec![
                r.name.clone(),
                r.method.clone(),
                r.layout.clone(),
                r.m.clone(),
                r.k.clone(),
                setting.to_string(),
            ];
            for n in &sizes {
                line.push(
                    eval.rows
                        .iter()
                        .find(|row| row.setting == setting && row.n == *n)
                        .map_or_else(|| "-".into(), |row| format!("{} ({})", pct(row.mean), pct(row.sd))),
                );
            }
            grid.push(line);
        }
    }
    render_table(&grid)
}

fn retrieval_table(runs: &[RunSummary]) -> String {
    let mut grid = vec![vec![
        "run".to_owned(),
        "representation".into(),
        "k".into(),
        "precision".into(),
        "queries".into(),
    ]];
    for r in runs {
        let Some(out) = &r.retrieval else { continue };
        grid.push(vec![
            r.name.clone(),
            format!("{} {} M={} K={}", r.method, r.layout, r.m, r.k),
            out.k.to_string(),
            pct(out.knn.precision),
            out.queries.to_string(),
        ]);
        for (metric, b) in &out.baselines {
            grid.push(vec![
                r.name.clone(),
                format!("word vectors ({metric})"),
                out.k.to_string(),
                pct(b.precision),
                b.queries.to_string(),
            ]);
        }
    }
    render_table(&grid)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::Config(format!("{}: {e}", path.display()))
}

fn write_transfer_csv(path: &Path, runs: &[RunSummary], only_n: Option<&str>) -> Result<()> {
    let mut w = csv_writer(path)?;
    let err = csv_err(path);
    w.write_record(["run", "method", "layout", "m", "k", "embed_mode", "pool", "n", "mean", "sd"])
        .map_err(&err)?;
    for r in runs {
        let Some(eval) = &r.eval else { continue };
        for row in &eval.rows {
            let n = row.n.to_string();
            if only_n.is_some_and(|want| want != n) {
                continue;
            }
            w.write_record([
                r.name.as_str(),
                &r.method,
                &r.layout,
                &r.m,
                &r.k,
                &row.setting.embed_mode.to_string(),
                &row.setting.pool.to_string(),
                &n,
                &format!("{:.6}", row.mean),
                &format!("{:.6}", row.sd),
            ])
            .map_err(&err)?;
        }
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn write_sweep_csv(path: &Path, runs: &[RunSummary]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let err = csv_err(path);
    w.write_record(["run", "method", "m", "k", "radius", "precision", "mean_cluster_size", "empty_queries"])
        .map_err(&err)?;
    for r in runs {
        let Some(out) = &r.retrieval else { continue };
        for p in &out.sweep {
            w.write_record([
                r.name.as_str(),
                &r.method,
                &r.m,
                &r.k,
                &p.radius.to_string(),
                &format!("{:.6}", p.precision),
                &format!("{:.3}", p.mean_cluster_size),
                &p.empty_queries.to_string(),
            ])
            .map_err(&err)?;
        }
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn report(root: &Path, a: &ReportArgs) -> Result<()> {
    let out_dir = a.out.clone().unwrap_or_else(|| root.join("report"));
    let mut dirs: Vec<PathBuf> = match std::fs::read_dir(root) {
        Ok(entries) => entries.filter_map(|e| e.ok()).map(|e| e.path()).filter(|p| p.is_dir()).collect(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(CliError::io(root, e)),
    };
    dirs.sort();
    let mut runs = Vec::new();
    for d in &dirs {
        if let Some(r) = load_run(d)? {
            runs.push(r);
        }
    }
    if runs.is_empty() {
        println!("report: no runs found under {}", root.display());
    }
    std::fs::create_dir_all(&out_dir).map_err(|e| CliError::io(&out_dir, e))?;
    let transfer = transfer_table(&runs);
    let retrieval = retrieval_table(&runs);
    for (name, text) in [("transfer_table.txt", &transfer), ("retrieval_table.txt", &retrieval)] {
        let p = out_dir.join(name);
        std::fs::write(&p, text).map_err(|e| CliError::io(&p, e))?;
    }
    write_transfer_csv(&out_dir.join("transfer_curves.csv"), &runs, None)?;
    write_transfer_csv(&out_dir.join("m_sweep.csv"), &runs, Some("200"))?;
    write_sweep_csv(&out_dir.join("radius_sweep.csv"), &runs)?;
    println!("transfer accuracy (%), mean (sd) over seeds:\n{transfer}");
    println!("retrieval label precision (%):\n{retrieval}");
    println!("report: {} runs summarized into {}", runs.len(), out_dir.display());
    Ok(())
}
