//! Files written by a run: the summary CSV, per-run trajectory CSVs, the
//! regime atlas and ESS tables, and a manifest with the config hash and seed.
//!
//! Summary columns, one row per sweep point in point order (blank when a
//! layer is disabled or has nothing to report):
//!
//! `id, point, family, sweep_var, value, lambda, r, nu, b, d, d_e, beta, gamma, q,`
//! `cf_row, cf_kind, cf_theta, cf_psi, cf_error,`
//! `ode_theta, ode_psi, ode_eta, ode_tail_theta, ode_tail_crossings, ode_steady, ode_fallback, ode_error,`
//! `mc_reps, mc_frozen, mc_theta, mc_psi, mc_sd_theta, mc_sd_psi, mc_tail_crossings, mc_bounds_hold, mc_error,`
//! `ess_verdict, ess_theta, ess_psi, ess_h, ess_beta_star, ess_conjectured, ess_mutation, ess_error,`
//! `stab_verdict, stab_eig_max, stab_lyap_frac, stab_error,`
//! `xv_ode, xv_ode_gap, xv_mc, xv_mc_gap, ess_mutation_beta, mc_seed`
//!
//! Floats are written with 17 significant digits. Wall times go to the
//! manifest only, so reruns give byte-identical summaries.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::{execute, in_pool, Experiment, HarnessError, Layer, Point, RunRecord};
use crate::attractor::{atlas_row, write_atlas_csv, AtlasRow};
use crate::ess::{classify_ess, write_ess_csv, EssRow};
use crate::policy::Policy;

pub const SUMMARY_HEADER: [&str; 54] = [
    "id", "point", "family", "sweep_var", "value", "lambda", "r", "nu", "b", "d", "d_e", "beta", "gamma", "q",
    "cf_row", "cf_kind", "cf_theta", "cf_psi", "cf_error",
    "ode_theta", "ode_psi", "ode_eta", "ode_tail_theta", "ode_tail_crossings", "ode_steady", "ode_fallback", "ode_error",
    "mc_reps", "mc_frozen", "mc_theta", "mc_psi", "mc_sd_theta", "mc_sd_psi", "mc_tail_crossings", "mc_bounds_hold",
    "mc_error",
    "ess_verdict", "ess_theta", "ess_psi", "ess_h", "ess_beta_star", "ess_conjectured", "ess_mutation", "ess_error",
    "stab_verdict", "stab_eig_max", "stab_lyap_frac", "stab_error",
    "xv_ode", "xv_ode_gap", "xv_mc", "xv_mc_gap", "ess_mutation_beta", "mc_seed",
];

fn f(v: f64) -> String {
    format!("{v:.16e}")
}

fn of(v: Option<f64>) -> String {
    v.map(f).unwrap_or_default()
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.display().to_string(), source }
}

fn policy_fields(p: &Policy) -> (Option<f64>, Option<f64>, Option<f64>) {
    match p {
        Policy::Threshold { beta, gamma, .. } => (Some(*beta), Some(*gamma), None),
        Policy::Static { q } => (None, None, Some(*q)),
        Policy::Mutant { base, p, .. } => {
            let (b, g, _) = policy_fields(base);
            (b, g, Some(*p))
        }
        _ => (p.beta(), None, None),
    }
}

fn summary_row(id: &str, seed: u64, rec: &RunRecord) -> Vec<String> {
    let p = &rec.point;
    let (beta, gamma, q) = policy_fields(&p.policy);
    let pr = &p.params;
    let mut row = vec![
        id.to_string(),
        p.index.to_string(),
        p.policy.family().to_string(),
        p.sweep_var.clone().unwrap_or_default(),
        of(p.value),
        f(pr.lambda),
        f(pr.r),
        f(pr.nu),
        f(pr.b),
        f(pr.d),
        f(pr.d_e),
        of(beta),
        of(gamma),
        of(q),
    ];

    let blank = |n: usize| vec![String::new(); n];
    match &rec.closed_form {
        None => row.extend(blank(5)),
        Some(Ok(a)) => row.extend([a.row.to_string(), a.kind.label().to_string(), f(a.theta), f(a.psi), String::new()]),
        Some(Err(e)) => {
            let mut cells = blank(4);
            if let Some(a) = rec.reference() {
                cells = vec![a.row.to_string(), a.kind.label().to_string(), f(a.theta), f(a.psi)];
            }
            row.extend(cells);
            row.push(e.to_string());
        }
    }

    match &rec.ode {
        None => row.extend(blank(8)),
        Some(Ok(o)) => row.extend([
            f(o.endpoint.theta),
            f(o.endpoint.psi),
            f(o.endpoint.eta),
            f(o.tail_theta),
            o.tail_crossings.to_string(),
            o.steady.to_string(),
            o.fallback.to_string(),
            String::new(),
        ]),
        Some(Err(e)) => {
            row.extend(blank(7));
            row.push(e.to_string());
        }
    }

    match &rec.mc {
        None => row.extend(blank(9)),
        Some(Err(e)) => {
            row.extend(blank(8));
            row.push(e.to_string());
        }
        Some(Ok(reps)) => {
            let frozen = reps.iter().filter(|r| r.freeze_epoch.is_some()).count();
            let ests: Vec<_> = reps.iter().filter_map(|r| r.estimate.as_ref().ok()).collect();
            let mean = |g: &dyn Fn(&&crate::chain::LimitEstimate) -> f64| {
                (!ests.is_empty()).then(|| ests.iter().map(g).sum::<f64>() / ests.len() as f64)
            };
            let crossings = reps.iter().filter_map(|r| r.tail_crossings).min();
            row.extend([
                reps.len().to_string(),
                frozen.to_string(),
                of(mean(&|e| e.theta)),
                of(mean(&|e| e.psi)),
                of(mean(&|e| e.sd_theta)),
                of(mean(&|e| e.sd_psi)),
                crossings.map(|c| c.to_string()).unwrap_or_default(),
                reps.iter().all(|r| r.bounds_hold).to_string(),
                String::new(),
            ]);
        }
    }

    let mut mutation_beta = None;
    match &rec.ess {
        None => row.extend(blank(8)),
        Some(Err(e)) => {
            row.extend(blank(7));
            row.push(e.to_string());
        }
        Some(Ok(o)) => {
            let v = &o.verdict;
            mutation_beta = o.mutation_beta;
            let (mutation, err) = match &o.mutation {
                None => (String::new(), String::new()),
                Some(Ok(r)) => ((if r.passed() { "pass" } else { "fail" }).to_string(), String::new()),
                Some(Err(e)) => ("error".to_string(), e.to_string()),
            };
            row.extend([
                v.kind.label().to_string(),
                of(v.equilibrium.map(|e| e.0)),
                of(v.equilibrium.map(|e| e.1)),
                of(v.h_value),
                of(v.beta_star_threshold),
                v.conjectured.to_string(),
                mutation,
                err,
            ]);
        }
    }

    match &rec.stability {
        None => row.extend(blank(4)),
        Some(Ok(c)) => row.extend([format!("{:?}", c.verdict), f(c.eigen_max_real), f(c.lyapunov_pass_fraction), String::new()]),
        Some(Err(e)) => {
            row.extend(blank(3));
            row.push(e.to_string());
        }
    }

    row.extend([
        rec.cross.ode.label().to_string(),
        of(rec.cross.ode.gap()),
        rec.cross.mc.label().to_string(),
        of(rec.cross.mc.gap()),
        of(mutation_beta),
        if rec.mc.is_some() { seed.to_string() } else { String::new() },
    ]);
    row
}

pub fn write_summary_csv<W: Write>(id: &str, seed: u64, records: &[RunRecord], w: W) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(SUMMARY_HEADER)?;
    for rec in records {
        out.write_record(summary_row(id, seed, rec))?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug)]
pub struct RunSummary {
    pub records: Vec<RunRecord>,
    pub summary_path: PathBuf,
    pub manifest_path: PathBuf,
    pub trajectory_files: Vec<PathBuf>,
    pub wall_seconds: f64,
}

fn create(path: &Path) -> Result<BufWriter<File>, HarnessError> {
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

pub fn summary_path(exp: &Experiment) -> PathBuf {
    exp.output_dir.join(format!("{}_summary.csv", exp.id))
}

pub fn mc_trajectory_name(id: &str, point: usize, replication: u32, seed: u64) -> String {
    format!("{id}_p{point:04}_r{replication}_seed{seed}.csv")
}

/// Executes the experiment and writes the summary, trajectories and manifest.
pub fn run(exp: &Experiment) -> Result<RunSummary, HarnessError> {
    let t0 = Instant::now();
    let records = execute(exp)?;
    let wall_seconds = t0.elapsed().as_secs_f64();
    fs::create_dir_all(&exp.output_dir).map_err(io_err(&exp.output_dir))?;

    let summary = summary_path(exp);
    let mut w = create(&summary)?;
    write_summary_csv(&exp.id, exp.mc.seed, &records, &mut w).map_err(|e| HarnessError::Io {
        path: summary.display().to_string(),
        source: std::io::Error::other(e.to_string()),
    })?;
    w.flush().map_err(io_err(&summary))?;

    let mut trajectory_files = Vec::new();
    if exp.write_trajectories {
        let dir = exp.output_dir.join("trajectories");
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        for rec in &records {
            if let Some(Ok(reps)) = &rec.mc {
                for r in reps {
                    let path = dir.join(mc_trajectory_name(&exp.id, rec.point.index, r.replication, exp.mc.seed));
                    let mut w = create(&path)?;
                    r.trajectory.write_csv(&mut w).map_err(io_err(&path))?;
                    w.flush().map_err(io_err(&path))?;
                    trajectory_files.push(path);
                }
            }
            if let Some(Ok(o)) = &rec.ode {
                let path = dir.join(format!("{}_p{:04}_ode.csv", exp.id, rec.point.index));
                let mut w = create(&path)?;
                o.path.write_csv(&mut w).map_err(io_err(&path))?;
                w.flush().map_err(io_err(&path))?;
                trajectory_files.push(path);
            }
        }
    }

    let manifest = exp.output_dir.join("run_manifest.txt");
    let mut m = create(&manifest)?;
    write_manifest(exp, &records, wall_seconds, &summary, &trajectory_files, &mut m).map_err(io_err(&manifest))?;
    m.flush().map_err(io_err(&manifest))?;
    Ok(RunSummary { records, summary_path: summary, manifest_path: manifest, trajectory_files, wall_seconds })
}

fn write_manifest<W: Write>(
    exp: &Experiment,
    records: &[RunRecord],
    wall_seconds: f64,
    summary: &Path,
    files: &[PathBuf],
    mut w: W,
) -> std::io::Result<()> {
    writeln!(w, "id = {}", exp.id)?;
    writeln!(w, "config_sha256 = {}", exp.config_sha256)?;
    writeln!(w, "seed = {}", exp.mc.seed)?;
    writeln!(w, "threads = {}", exp.threads.map(|t| t.to_string()).unwrap_or_else(|| "auto".into()))?;
    writeln!(w, "layers = {}", exp.layers.iter().map(Layer::label).collect::<Vec<_>>().join(","))?;
    writeln!(w, "points = {}", records.len())?;
    writeln!(w, "version = {}", env!("CARGO_PKG_VERSION"))?;
    writeln!(w, "summary = {}", summary.display())?;
    writeln!(w, "trajectory_files = {}", files.len())?;
    writeln!(w, "wall_seconds = {wall_seconds:.3}")?;
    for rec in records {
        writeln!(w, "point {} wall_seconds = {:.3}", rec.point.index, rec.wall_seconds)?;
    }
    Ok(())
}

/// Closed-form row for every point.
pub fn atlas(exp: &Experiment) -> Result<Vec<AtlasRow>, HarnessError> {
    use rayon::prelude::*;
    let points = exp.points();
    in_pool(exp.threads, || points.par_iter().map(|p| atlas_row(&p.params, &p.policy)).collect())
}

pub fn write_atlas(exp: &Experiment) -> Result<PathBuf, HarnessError> {
    fs::create_dir_all(&exp.output_dir).map_err(io_err(&exp.output_dir))?;
    let path = exp.output_dir.join(format!("{}_atlas.csv", exp.id));
    let mut w = create(&path)?;
    write_atlas_csv(&atlas(exp)?, &mut w).map_err(io_err(&path))?;
    w.flush().map_err(io_err(&path))?;
    Ok(path)
}

/// ESS verdict at every point, grouped by family.
pub fn ess_table(exp: &Experiment) -> Result<Vec<(&'static str, Vec<EssRow>)>, HarnessError> {
    use rayon::prelude::*;
    let costs = exp.costs.ok_or_else(|| HarnessError::Config("the ess table needs a [costs] section".into()))?;
    let points = exp.points();
    let verdicts: Vec<(&Point, _)> =
        in_pool(exp.threads, || points.par_iter().map(|p| (p, classify_ess(&p.policy, &p.params, &costs))).collect())?;
    let mut out: Vec<(&'static str, Vec<EssRow>)> = Vec::new();
    for (p, v) in verdicts {
        let family = p.policy.family();
        let verdict = match v {
            Ok(v) => v,
            // invalid point: reported as a marginal verdict without data
            Err(_) => crate::ess::EssVerdict {
                kind: crate::ess::EssKind::Marginal,
                beta_star_threshold: None,
                equilibrium: None,
                h_value: None,
                conjectured: p.params.d_e > 0.0,
                marginal_on: Some("error"),
            },
        };
        let row = EssRow {
            sweep_var: p.sweep_var.clone().unwrap_or_else(|| "none".into()),
            value: p.value.unwrap_or(f64::NAN),
            verdict,
        };
        match out.iter_mut().find(|(f, _)| *f == family) {
            Some((_, rows)) => rows.push(row),
            None => out.push((family, vec![row])),
        }
    }
    Ok(out)
}

pub fn write_ess(exp: &Experiment) -> Result<Vec<PathBuf>, HarnessError> {
    fs::create_dir_all(&exp.output_dir).map_err(io_err(&exp.output_dir))?;
    let mut paths = Vec::new();
    for (family, rows) in ess_table(exp)? {
        let path = exp.output_dir.join(format!("{}_ess_{}.csv", exp.id, family));
        let mut w = create(&path)?;
        write_ess_csv(&rows, &mut w).map_err(io_err(&path))?;
        w.flush().map_err(io_err(&path))?;
        paths.push(path);
    }
    Ok(paths)
}
