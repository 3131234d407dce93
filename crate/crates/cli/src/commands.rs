use std::path::Path;

use cmr_core::designs::{build_categorical, build_general, build_intercept, build_multi_categorical, MetaColumn, MetaValues};
use cmr_core::estimators::stein_bayes_estimate;
use cmr_core::inference::{ci_zero_inclusion, correlation_pvalues, sample_correlation, significance_matrix};
use cmr_core::model::{center_dataset, default_rank, standardize_dataset, Hyperparams, MetaDesign};
use cmr_core::sampler::{run_chain, ChainConfig, CuspUpdate, ModelVariant};
use cmr_core::simharness::{lod_experiment, run_grid, summarize, GridSpec, LodConfig, LodMethod, Method, NRule, Regime};
use nalgebra::{DMatrix, DVector};
use serde_json::json;

use crate::args::{AnalyzeArgs, ChainArgs, CuspUpdateArg, DesignArgs, FitArgs, ImputeArgs, ModelArg, Preset, SimulateArgs};
use crate::io::{fmt_f64, read_lod, read_mask, read_matrix, read_table, table_matrix, CliError, CliResult, Manifest, RunDir};

fn chain_config(a: &ChainArgs) -> CliResult<ChainConfig> {
    let base = match a.preset {
        Some(Preset::Paper) => ChainConfig::paper(),
        _ => ChainConfig::default(),
    };
    let n_iter = a.iters.unwrap_or(base.n_iter);
    let burn_in = a.burn.unwrap_or(if a.iters.is_some() { n_iter / 2 } else { base.burn_in });
    let cfg = ChainConfig {
        n_iter,
        burn_in,
        thin: a.thin,
        seed: a.seed,
        cusp_update: match a.cusp_update {
            CuspUpdateArg::Collapsed => CuspUpdate::Collapsed,
            CuspUpdateArg::Printed => CuspUpdate::Printed,
        },
        ..base
    };
    cfg.validate()?;
    Ok(cfg)
}

fn hyperparams(a: &ChainArgs, p: usize) -> CliResult<Hyperparams> {
    let d = Hyperparams::for_dimension(p);
    let hp = Hyperparams {
        a_d: a.a_d.unwrap_or(d.a_d),
        b_d: a.b_d.unwrap_or(d.b_d),
        a_tau: a.a_tau.unwrap_or(d.a_tau),
        b_tau: a.b_tau.unwrap_or(d.b_tau),
        a_theta: a.a_theta.unwrap_or(d.a_theta),
        b_theta: a.b_theta.unwrap_or(d.b_theta),
        theta_inf: a.theta_inf.unwrap_or(d.theta_inf),
        alpha: a.alpha.unwrap_or(d.alpha),
        r: a.rank.unwrap_or(default_rank(p)),
        ridge_enabled: a.ridge,
        a_l: a.a_l.unwrap_or(d.a_l),
        b_l: a.b_l.unwrap_or(d.b_l),
    };
    hp.validate(p)?;
    Ok(hp)
}

fn design_inputs(a: &DesignArgs) -> Vec<&Path> {
    [a.groups.as_deref(), a.meta_table.as_deref(), a.types.as_deref()]
        .into_iter()
        .flatten()
        .collect()
}

/// `None` when no design flag is given.
fn load_design(a: &DesignArgs, p: usize) -> CliResult<Option<MetaDesign>> {
    if a.intercept {
        return Ok(Some(build_intercept(p)?));
    }
    if let Some(path) = &a.groups {
        let t = read_table(path)?;
        check_rows(path, t.rows.len(), p)?;
        let mut groupings = Vec::with_capacity(t.headers.len());
        for (c, name) in t.headers.iter().enumerate() {
            let labels = t
                .rows
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    r[c].parse::<usize>().ok().filter(|v| *v >= 1).ok_or_else(|| {
                        CliError::Malformed(format!(
                            "{}: row {}, column `{name}`: group labels must be integers >= 1, got `{}`",
                            path.display(),
                            i + 1,
                            r[c]
                        ))
                    })
                })
                .collect::<CliResult<Vec<usize>>>()?;
            groupings.push(labels);
        }
        let design = if groupings.len() == 1 {
            build_categorical(&groupings[0])?
        } else {
            build_multi_categorical(&groupings)?
        };
        return Ok(Some(design));
    }
    if let Some(path) = &a.meta_table {
        let types_path = a.types.as_ref().expect("clap enforces --types");
        let kinds = read_types(types_path)?;
        let t = read_table(path)?;
        check_rows(path, t.rows.len(), p)?;
        let mut columns = Vec::new();
        for (c, name) in t.headers.iter().enumerate() {
            let kind = kinds
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, k)| k.as_str())
                .ok_or_else(|| CliError::Malformed(format!("meta column `{name}` has no entry in {}", types_path.display())))?;
            let cells: Vec<String> = t.rows.iter().map(|r| r[c].clone()).collect();
            let values = match kind {
                "drop" => continue,
                "categorical" => MetaValues::Categorical(cells),
                "continuous" => MetaValues::Continuous(
                    cells
                        .iter()
                        .enumerate()
                        .map(|(i, s)| {
                            s.parse::<f64>().map_err(|_| {
                                CliError::Malformed(format!("{}: row {}, column `{name}`: `{s}` is not a number", path.display(), i + 1))
                            })
                        })
                        .collect::<CliResult<Vec<f64>>>()?,
                ),
                _ => unreachable!("validated in read_types"),
            };
            columns.push(MetaColumn { name: name.clone(), values });
        }
        let design = if columns.is_empty() {
            build_intercept(p)?
        } else {
            build_general(&columns, true)?
        };
        return Ok(Some(design));
    }
    Ok(None)
}

fn check_rows(path: &Path, rows: usize, p: usize) -> CliResult<()> {
    if rows != p {
        return Err(CliError::Dimension(format!(
            "{} has {rows} rows but the data have {p} variables",
            path.display()
        )));
    }
    Ok(())
}

/// Lines `name,kind`; an optional `name,kind` header line is skipped.
fn read_types(path: &Path) -> CliResult<Vec<(String, String)>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Malformed(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CliError::Malformed(format!("{}: {e}", path.display())))?;
        if rec.len() != 2 {
            return Err(CliError::Malformed(format!("{}: line {} must be `name,kind`", path.display(), i + 1)));
        }
        let (name, kind) = (rec[0].to_string(), rec[1].to_ascii_lowercase());
        if i == 0 && name == "name" && kind == "kind" {
            continue;
        }
        if !matches!(kind.as_str(), "categorical" | "continuous" | "drop") {
            return Err(CliError::Malformed(format!(
                "{}: line {}: kind `{kind}` is not one of categorical, continuous, drop",
                path.display(),
                i + 1
            )));
        }
        out.push((name, kind));
    }
    Ok(out)
}

pub fn cmd_fit(a: &FitArgs) -> CliResult<()> {
    let table = read_table(&a.data)?;
    let names = table.headers.clone();
    let (n, p) = (table.rows.len(), names.len());
    let mask = match &a.censored {
        Some(path) => read_mask(path)?,
        None => DMatrix::from_element(n, p, false),
    };
    let y = table_matrix(&a.data, &table, Some(&mask))?;
    let lod = match &a.lod {
        Some(path) => DVector::from_vec(read_lod(path, p)?),
        None => DVector::from_element(p, f64::INFINITY),
    };
    let data = if a.standardize {
        standardize_dataset(&y, &mask, &lod)?
    } else {
        center_dataset(&y, &mask, &lod)?
    };
    let design = match load_design(&a.design, p)? {
        Some(d) => d,
        None => build_intercept(p)?,
    };
    if design.p() != p {
        return Err(CliError::Dimension(format!("design has {} rows for {p} variables", design.p())));
    }
    if !(a.level > 0.0 && a.level < 1.0) {
        return Err(CliError::Malformed(format!("--level {} outside (0, 1)", a.level)));
    }
    let hp = hyperparams(&a.chain, p)?;
    let cfg = ChainConfig {
        save_chain: a.save_chain,
        credible_level: a.level,
        model_variant: match a.model {
            ModelArg::Cmr => ModelVariant::Cmr,
            ModelArg::CuspBaseline => ModelVariant::CuspBaseline,
        },
        ..chain_config(&a.chain)?
    };

    let mut run = RunDir::create(&a.out)?;
    let mut inputs: Vec<&Path> = vec![a.data.as_path()];
    inputs.extend(a.lod.as_deref());
    inputs.extend(a.censored.as_deref());
    inputs.extend(design_inputs(&a.design));
    let config = json!({
        "chain": cfg,
        "hyperparameters": hp,
        "standardize": a.standardize,
        "n": n,
        "p": p,
        "q": design.q(),
    });
    let mut manifest = Manifest::start("fit", config, &inputs)?;
    run.write_manifest(&manifest)?;

    let out = run_chain(&data, &design, &hp, &cfg)?;
    let s = &out.summary;
    let scale = &data.column_scales;
    let mut cov = stein_bayes_estimate(s)?;
    for j in 0..p {
        for k in 0..p {
            cov[(j, k)] *= scale[j] * scale[k];
        }
    }
    run.write_matrix("posterior_correlation.csv", &names, &s.mean_corr)?;
    run.write_matrix("stein_bayes_covariance.csv", &names, &cov)?;
    run.write_bool_matrix("zero_inclusion.csv", &names, &ci_zero_inclusion(s, a.level)?)?;
    let trace: Vec<Vec<String>> = s
        .active_factors_trace
        .iter()
        .enumerate()
        .map(|(i, k)| vec![(i + 1).to_string(), k.to_string()])
        .collect();
    run.write_rows("active_factors.csv", &["iteration".into(), "active_factors".into()], &trace)?;
    if data.has_censoring() {
        let rows: Vec<Vec<String>> = s
            .imputed_mean
            .iter()
            .map(|((i, j), v)| vec![(i + 1).to_string(), names[*j].clone(), fmt_f64(*v)])
            .collect();
        run.write_rows("imputed.csv", &["row".into(), "variable".into(), "posterior_mean".into()], &rows)?;
    }
    if let Some(chain) = &out.chain {
        let mut buf = Vec::new();
        for state in chain {
            serde_json::to_writer(&mut buf, state).map_err(|e| CliError::Io(e.to_string()))?;
            buf.push(b'\n');
        }
        run.write("chain.jsonl", &buf)?;
    }
    manifest.finish(&run, "ok");
    run.write_manifest(&manifest)
}

fn parse_regime(s: &str) -> CliResult<Regime> {
    match s {
        "cor" => Ok(Regime::cor()),
        "block" => Ok(Regime::block()),
        "kron" => Ok(Regime::kron()),
        other => Err(CliError::Malformed(format!("unknown regime `{other}`; valid: cor, block, kron"))),
    }
}

pub fn cmd_simulate(a: &SimulateArgs) -> CliResult<()> {
    let regimes = a.regime.iter().map(|s| parse_regime(s)).collect::<CliResult<Vec<_>>>()?;
    let methods = a
        .methods
        .iter()
        .map(|s| s.parse::<Method>().map_err(|e| CliError::Malformed(e.to_string())))
        .collect::<CliResult<Vec<_>>>()?;
    let n_rules = a
        .n_rule
        .iter()
        .map(|s| s.parse::<NRule>().map_err(|e| CliError::Malformed(e.to_string())))
        .collect::<CliResult<Vec<_>>>()?;
    let mut spec = match a.preset {
        Some(Preset::Paper) => GridSpec::paper_scale(regimes, methods),
        _ => GridSpec::desk(regimes, methods, vec![], vec![NRule::PPlusOne, NRule::OneAndHalfP, NRule::ThreeP]),
    };
    spec.master_seed = a.master_seed;
    if !a.p.is_empty() {
        spec.p_list = a.p.clone();
    }
    if !n_rules.is_empty() {
        spec.n_rules = n_rules;
    }
    if let Some(r) = a.reps {
        spec.n_replicates = r;
    }
    if let Some(it) = a.iters {
        spec.chain.n_iter = it;
        spec.chain.burn_in = a.burn.unwrap_or(it / 2);
    } else if let Some(b) = a.burn {
        spec.chain.burn_in = b;
    }
    if spec.p_list.is_empty() {
        return Err(CliError::Malformed("--p is required unless --preset paper is given".into()));
    }
    if spec.n_replicates == 0 {
        return Err(CliError::Malformed("--reps must be at least 1".into()));
    }
    spec.chain.validate()?;

    let mut run = RunDir::create(&a.out)?;
    let mut manifest = Manifest::start("simulate", serde_json::to_value(&spec).expect("serializable"), &[])?;
    run.write_manifest(&manifest)?;

    let records = run_grid(&spec);
    let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
    let header: Vec<String> = ["regime", "method", "p", "n", "replicate", "seed", "stein_loss", "active_factors", "error"]
        .map(String::from)
        .to_vec();
    let rows: Vec<Vec<String>> = records
        .iter()
        .map(|r| {
            vec![
                r.regime.clone(),
                r.method.tag().into(),
                r.p.to_string(),
                r.n.to_string(),
                r.replicate.to_string(),
                r.seed.to_string(),
                opt(r.stein_loss),
                opt(r.active_factors),
                r.error.clone().unwrap_or_default(),
            ]
        })
        .collect();
    run.write_rows("records.csv", &header, &rows)?;
    let timing: Vec<Vec<String>> = records
        .iter()
        .map(|r| {
            vec![
                r.regime.clone(),
                r.method.tag().into(),
                r.p.to_string(),
                r.n.to_string(),
                r.replicate.to_string(),
                format!("{:.6}", r.wall_time_secs),
            ]
        })
        .collect();
    let theader: Vec<String> = ["regime", "method", "p", "n", "replicate", "wall_time_secs"].map(String::from).to_vec();
    run.write_rows("timings.csv", &theader, &timing)?;
    let summary = serde_json::to_vec_pretty(&summarize(&records)).map_err(|e| CliError::Io(e.to_string()))?;
    run.write("summary.json", &summary)?;

    let all_failed = !records.is_empty() && records.iter().all(|r| r.stein_loss.is_none());
    manifest.finish(&run, if all_failed { "failed" } else { "ok" });
    run.write_manifest(&manifest)?;
    if records.is_empty() {
        return Err(CliError::Malformed("no method applies to the requested regimes".into()));
    }
    if all_failed {
        return Err(CliError::Sampler(format!(
            "every grid cell failed; first error: {}",
            records[0].error.as_deref().unwrap_or("unknown")
        )));
    }
    Ok(())
}

pub fn cmd_impute_lod(a: &ImputeArgs) -> CliResult<()> {
    let (names, y) = read_matrix(&a.data)?;
    let p = names.len();
    let methods = a
        .methods
        .iter()
        .map(|s| s.parse::<LodMethod>().map_err(|e| CliError::Malformed(e.to_string())))
        .collect::<CliResult<Vec<_>>>()?;
    let design = load_design(&a.design, p)?;
    if methods.contains(&LodMethod::Cmr) && design.is_none() {
        return Err(CliError::Malformed(
            "method `cmr` needs --groups or --meta-table (or --intercept)".into(),
        ));
    }
    for &t in &a.n_test {
        if t == 0 || 2 * t >= y.nrows() {
            return Err(CliError::Malformed(format!("--n-test {t} must lie in 1..n/2 (n = {})", y.nrows())));
        }
    }
    let hp = hyperparams(&a.chain, p)?;
    let cfg = LodConfig {
        chain: chain_config(&a.chain)?,
        hp: Some(hp.clone()),
        standardize: !a.no_standardize,
    };

    let mut run = RunDir::create(&a.out)?;
    let mut inputs: Vec<&Path> = vec![a.data.as_path()];
    inputs.extend(design_inputs(&a.design));
    let config = json!({
        "chain": cfg.chain,
        "hyperparameters": hp,
        "standardize": cfg.standardize,
        "n_test": a.n_test,
        "methods": methods.iter().map(|m| m.tag()).collect::<Vec<_>>(),
    });
    let mut manifest = Manifest::start("impute-lod", config, &inputs)?;
    run.write_manifest(&manifest)?;

    let out = lod_experiment(&y, &a.n_test, &methods, design.as_ref(), &cfg)?;
    let rows: Vec<Vec<String>> = out
        .rows
        .iter()
        .map(|r| vec![fmt_f64(r.pct_detected), r.n_test.to_string(), r.method.clone(), fmt_f64(r.rmse)])
        .collect();
    let h = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    run.write_rows("rmse.csv", &h(&["pct_detected", "n_test", "method", "rmse"]), &rows)?;

    let mut truth_rows = Vec::new();
    let mut lod_rows = Vec::new();
    for ho in &out.holdouts {
        for &(i, j, v) in &ho.truth {
            truth_rows.push(vec![ho.n_test.to_string(), (i + 1).to_string(), names[j].clone(), fmt_f64(v)]);
        }
        let mut row = vec![ho.n_test.to_string()];
        row.extend(ho.lod.iter().map(|v| fmt_f64(*v)));
        lod_rows.push(row);
    }
    run.write_rows("heldout_truth.csv", &h(&["n_test", "row", "variable", "value"]), &truth_rows)?;
    let mut lod_header = vec!["n_test".to_string()];
    lod_header.extend(names.iter().cloned());
    run.write_rows("detection_limits.csv", &lod_header, &lod_rows)?;
    for m in &methods {
        let mut rows = Vec::new();
        for (n_test, _, est) in out.imputed.iter().filter(|(_, t, _)| t == m.tag()) {
            let ho = out.holdouts.iter().find(|h| h.n_test == *n_test).expect("hold-out per n_test");
            for (&(i, j, _), v) in ho.truth.iter().zip(est) {
                rows.push(vec![n_test.to_string(), (i + 1).to_string(), names[j].clone(), fmt_f64(*v)]);
            }
        }
        run.write_rows(&format!("imputed_{}.csv", m.tag()), &h(&["n_test", "row", "variable", "value"]), &rows)?;
    }
    manifest.finish(&run, "ok");
    run.write_manifest(&manifest)
}

pub fn cmd_analyze(a: &AnalyzeArgs) -> CliResult<()> {
    let (names, y) = read_matrix(&a.data)?;
    if !(a.level > 0.0 && a.level < 1.0) {
        return Err(CliError::Malformed(format!("--level {} outside (0, 1)", a.level)));
    }
    let mut run = RunDir::create(&a.out)?;
    let mut manifest = Manifest::start("analyze", json!({ "level": a.level, "method": "benjamini_yekutieli" }), &[&a.data])?;
    run.write_manifest(&manifest)?;
    let corr = sample_correlation(&y)?;
    let pv = correlation_pvalues(&y)?;
    let sig = significance_matrix(&pv, a.level)?;
    run.write_matrix("sample_correlation.csv", &names, &corr)?;
    run.write_matrix("pvalues.csv", &names, &pv)?;
    run.write_matrix("adjusted_pvalues.csv", &names, &sig.p_adjusted)?;
    run.write_bool_matrix("reject.csv", &names, &sig.reject)?;
    manifest.finish(&run, "ok");
    run.write_manifest(&manifest)
}
