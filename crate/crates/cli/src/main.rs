//! Command-line interface for clustered-regression estimation under an
//! exclusion restriction.
//!
//! Datasets are CSV files with named columns: `y`, `x`, and `cluster` are
//! required; `time` (integers) and `coord_x`/`coord_y` (floats) are optional
//! and enable the time- and distance-based exclusion recipes. Every other
//! column is treated as a numeric control. An intercept is added
//! automatically unless `--no-intercept` or `--cluster-dummies` is given.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use serde_json::json;

use clusteriv::inference::{ar_test, cluster_robust_variance, jackknife_variance, numerator_stat};
use clusteriv::{
    build_astar, build_projection, estimate, estimate_iv_form, invert_ar, negligibility_ratios,
    run_monte_carlo, write_rep_csv, CenteringMethod, CenteringMode, ClusterPartition,
    ClusteredDataset, ControlMatrix, ExclusionMatrix, ExclusionRecipe, McConfig, ShockModel,
};

#[derive(Parser)]
#[command(
    name = "clusteriv",
    version,
    about = "Bias-free estimation and weak-identification-robust inference \
             for clustered regressions under an exclusion restriction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Point estimate with jackknife and cluster-robust standard errors.
    Estimate(EstimateArgs),
    /// Score test and inverted confidence set for the coefficient.
    Infer(InferArgs),
    /// Centering-matrix diagnostics for a dataset and recipe.
    Diagnose(DiagnoseArgs),
    /// Monte Carlo simulation driven by a TOML configuration.
    Simulate(SimulateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    /// Constrain rows: A W = 0 (residualizes the outcome side).
    Outcome,
    /// Constrain columns: W' A = 0 (residualizes the design side).
    Design,
}

impl From<ModeArg> for CenteringMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Outcome => CenteringMode::Outcome,
            ModeArg::Design => CenteringMode::Design,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    /// Row-wise leave-out solve (production default).
    LeaveOut,
    /// Cluster-block dense solve.
    BlockB,
    /// Full vectorized KKT system (small problems only).
    VecOracle,
}

impl From<MethodArg> for CenteringMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::LeaveOut => CenteringMethod::LeaveOut,
            MethodArg::BlockB => CenteringMethod::BlockB,
            MethodArg::VecOracle => CenteringMethod::VecOracle,
        }
    }
}

/// Options shared by every dataset-driven subcommand.
#[derive(Args)]
struct DataArgs {
    /// CSV dataset with columns y, x, cluster [, time, coord_x, coord_y,
    /// controls...].
    #[arg(long)]
    data: PathBuf,

    /// Exclusion recipe: weak-exogeneity | horizon=K | contemporaneous |
    /// distance=R | unrestricted | pairs=FILE (CSV of row,col indices).
    #[arg(long)]
    recipe: String,

    /// Which side of the regression the centering matrix annihilates.
    #[arg(long, value_enum, default_value = "outcome")]
    mode: ModeArg,

    /// Construction algorithm for the centering matrix.
    #[arg(long, value_enum, default_value = "leave-out")]
    method: MethodArg,

    /// Do not add an intercept column.
    #[arg(long)]
    no_intercept: bool,

    /// Use cluster indicator variables as controls (implies no intercept).
    #[arg(long)]
    cluster_dummies: bool,
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    data: DataArgs,

    /// Significance level of the test and (1 - alpha) confidence set.
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,

    /// Null value to test; defaults to 0.
    #[arg(long, default_value_t = 0.0)]
    beta0: f64,

    /// Write the test statistic over a grid of null values to this CSV file.
    #[arg(long)]
    ar_curve: Option<PathBuf>,

    /// Number of grid points for --ar-curve.
    #[arg(long, default_value_t = 401)]
    curve_points: usize,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[command(flatten)]
    data: DataArgs,

    /// Write the centering matrix as row,col,value triplets to this CSV file.
    #[arg(long)]
    triplets: Option<PathBuf>,

    /// Relative magnitude threshold for exported triplets.
    #[arg(long, default_value_t = 0.01)]
    threshold: f64,
}

#[derive(Args)]
struct SimulateArgs {
    /// TOML simulation configuration.
    #[arg(long)]
    config: PathBuf,

    /// Write the summary report (JSON) here in addition to stdout.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Write one CSV row per replication here.
    #[arg(long)]
    reps_csv: Option<PathBuf>,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Estimate(args) => cmd_estimate(args),
        Command::Infer(args) => cmd_infer(args),
        Command::Diagnose(args) => cmd_diagnose(args),
        Command::Simulate(args) => cmd_simulate(args),
    }
}

// ---------------------------------------------------------------------------
// Dataset loading
// ---------------------------------------------------------------------------

struct Dataset {
    data: ClusteredDataset,
    times: Option<Vec<i64>>,
    coords: Option<Vec<(f64, f64)>>,
    control_names: Vec<String>,
}

fn parse_float(field: &str, column: &str, row: usize) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .with_context(|| format!("row {row}: column '{column}' is not numeric: '{field}'"))
}

fn load_dataset(args: &DataArgs) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(&args.data)
        .with_context(|| format!("cannot open dataset {}", args.data.display()))?;
    let headers: Vec<String> = reader
        .headers()
        .context("dataset has no header row")?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();

    let col = |name: &str| headers.iter().position(|h| h == name);
    let y_col = col("y").context("dataset is missing required column 'y'")?;
    let x_col = col("x").context("dataset is missing required column 'x'")?;
    let cluster_col = col("cluster").context("dataset is missing required column 'cluster'")?;
    let time_col = col("time");
    let cx_col = col("coord_x");
    let cy_col = col("coord_y");
    if cx_col.is_some() != cy_col.is_some() {
        bail!("coord_x and coord_y must both be present or both absent");
    }
    let special = [
        Some(y_col),
        Some(x_col),
        Some(cluster_col),
        time_col,
        cx_col,
        cy_col,
    ];
    let control_cols: Vec<usize> = (0..headers.len())
        .filter(|c| !special.contains(&Some(*c)))
        .collect();
    let control_names: Vec<String> = control_cols.iter().map(|&c| headers[c].clone()).collect();

    let mut y = Vec::new();
    let mut x = Vec::new();
    let mut assignment = Vec::new();
    let mut cluster_ids: HashMap<String, usize> = HashMap::new();
    let mut times = Vec::new();
    let mut coords = Vec::new();
    let mut controls_raw: Vec<f64> = Vec::new();

    for (idx, record) in reader.records().enumerate() {
        let row = idx + 2; // 1-based, after the header
        let record = record.with_context(|| format!("row {row}: malformed CSV"))?;
        let field = |c: usize| -> &str { record.get(c).unwrap_or("") };
        y.push(parse_float(field(y_col), "y", row)?);
        x.push(parse_float(field(x_col), "x", row)?);
        let label = field(cluster_col).trim().to_string();
        if label.is_empty() {
            bail!("row {row}: empty cluster label");
        }
        let next_id = cluster_ids.len();
        assignment.push(*cluster_ids.entry(label).or_insert(next_id));
        if let Some(c) = time_col {
            let t = field(c)
                .trim()
                .parse::<i64>()
                .with_context(|| format!("row {row}: column 'time' is not an integer"))?;
            times.push(t);
        }
        if let (Some(cx), Some(cy)) = (cx_col, cy_col) {
            coords.push((
                parse_float(field(cx), "coord_x", row)?,
                parse_float(field(cy), "coord_y", row)?,
            ));
        }
        for &c in &control_cols {
            controls_raw.push(parse_float(field(c), &headers[c], row)?);
        }
    }

    let n = y.len();
    if n == 0 {
        bail!("dataset has no observation rows");
    }
    let partition = ClusterPartition::new(assignment.clone())?;

    let k_extra = control_cols.len();
    let controls = if args.cluster_dummies {
        if k_extra == 0 {
            ControlMatrix::group_indicators(assignment)?
        } else {
            let clusters = partition.num_clusters();
            let mut w = DMatrix::zeros(n, clusters + k_extra);
            for (l, &g) in assignment.iter().enumerate() {
                w[(l, g)] = 1.0;
                for j in 0..k_extra {
                    w[(l, clusters + j)] = controls_raw[l * k_extra + j];
                }
            }
            ControlMatrix::dense(w)?
        }
    } else {
        let intercept = if args.no_intercept { 0 } else { 1 };
        if intercept + k_extra == 0 {
            bail!("no control columns: drop --no-intercept or add controls");
        }
        let mut w = DMatrix::zeros(n, intercept + k_extra);
        for l in 0..n {
            if intercept == 1 {
                w[(l, 0)] = 1.0;
            }
            for j in 0..k_extra {
                w[(l, intercept + j)] = controls_raw[l * k_extra + j];
            }
        }
        ControlMatrix::dense(w)?
    };

    let data = ClusteredDataset::new(
        DVector::from_vec(y),
        DVector::from_vec(x),
        controls,
        partition,
    )?;
    Ok(Dataset {
        data,
        times: (!times.is_empty()).then_some(times),
        coords: (!coords.is_empty()).then_some(coords),
        control_names,
    })
}

// ---------------------------------------------------------------------------
// Recipe parsing
// ---------------------------------------------------------------------------

enum RecipeArg {
    Named(ExclusionRecipe),
    Pairs(PathBuf),
}

fn parse_recipe(text: &str) -> Result<RecipeArg> {
    let t = text.trim();
    let named = match t {
        "weak-exogeneity" | "weak_exogeneity" => Some(ExclusionRecipe::WeakExogeneity),
        "contemporaneous" => Some(ExclusionRecipe::Contemporaneous),
        "unrestricted" => Some(ExclusionRecipe::Unrestricted),
        _ => None,
    };
    if let Some(r) = named {
        return Ok(RecipeArg::Named(r));
    }
    if let Some(v) = t.strip_prefix("horizon=") {
        let k: u32 = v
            .parse()
            .with_context(|| format!("invalid horizon '{v}' (expected a nonnegative integer)"))?;
        return Ok(RecipeArg::Named(ExclusionRecipe::Horizon(k)));
    }
    if let Some(v) = t.strip_prefix("distance=") {
        let r: f64 = v
            .parse()
            .with_context(|| format!("invalid distance '{v}' (expected a number)"))?;
        return Ok(RecipeArg::Named(ExclusionRecipe::DistanceCutoff(r)));
    }
    if let Some(v) = t.strip_prefix("pairs=") {
        return Ok(RecipeArg::Pairs(PathBuf::from(v)));
    }
    bail!(
        "unknown recipe '{t}'; expected weak-exogeneity, horizon=K, \
         contemporaneous, distance=R, unrestricted, or pairs=FILE"
    );
}

fn load_pairs(path: &Path, n: usize) -> Result<Vec<(usize, usize)>> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read pairs file {}", path.display()))?;
    let mut pairs = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (idx == 0 && line.eq_ignore_ascii_case("row,col")) {
            continue;
        }
        let (r, c) = line
            .split_once(',')
            .with_context(|| format!("pairs line {}: expected 'row,col'", idx + 1))?;
        let r: usize = r.trim().parse().with_context(|| {
            format!("pairs line {}: invalid row index '{}'", idx + 1, r.trim())
        })?;
        let c: usize = c.trim().parse().with_context(|| {
            format!("pairs line {}: invalid col index '{}'", idx + 1, c.trim())
        })?;
        if r >= n || c >= n {
            bail!(
                "pairs line {}: index out of range (n = {n}): {r},{c}",
                idx + 1
            );
        }
        pairs.push((r, c));
    }
    Ok(pairs)
}

struct Prepared {
    ds: Dataset,
    exclusion: ExclusionMatrix,
    mode: CenteringMode,
    method: CenteringMethod,
    recipe_label: String,
}

fn prepare(args: &DataArgs) -> Result<Prepared> {
    let ds = load_dataset(args)?;
    let recipe = parse_recipe(&args.recipe)?;
    let partition = ds.data.partition.clone();
    let exclusion = match &recipe {
        RecipeArg::Named(r) => {
            if matches!(
                r,
                ExclusionRecipe::WeakExogeneity
                    | ExclusionRecipe::Horizon(_)
                    | ExclusionRecipe::Contemporaneous
            ) && ds.times.is_none()
            {
                bail!("recipe '{}' needs a 'time' column", args.recipe);
            }
            if matches!(r, ExclusionRecipe::DistanceCutoff(_)) && ds.coords.is_none() {
                bail!("recipe '{}' needs coord_x and coord_y columns", args.recipe);
            }
            ExclusionMatrix::from_recipe(
                partition,
                r,
                ds.times.as_deref(),
                ds.coords.as_deref(),
            )?
        }
        RecipeArg::Pairs(path) => {
            let pairs = load_pairs(path, ds.data.n())?;
            ExclusionMatrix::from_zero_pairs(partition, pairs)?
        }
    };
    Ok(Prepared {
        ds,
        exclusion,
        mode: args.mode.into(),
        method: args.method.into(),
        recipe_label: args.recipe.clone(),
    })
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn print_json(value: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn cmd_estimate(args: EstimateArgs) -> Result<()> {
    let p = prepare(&args.data)?;
    let proj = build_projection(p.ds.data.controls.clone())?;
    let a = build_astar(&proj, &p.exclusion, p.mode, p.method)?;
    let est = estimate(&p.ds.data, &a)?;
    let iv = estimate_iv_form(&p.ds.data, &a, &proj)?;
    let stat = numerator_stat(&p.ds.data, &a, est.beta)?;
    let v_jk = jackknife_variance(&stat);
    let v_cr = cluster_robust_variance(&p.ds.data, &a, est.beta)?;
    let scale = est.denominator.abs();
    let (diag_sq, offdiag_sq) = a.frobenius_sq_split();

    print_json(&json!({
        "n": p.ds.data.n(),
        "clusters": p.ds.data.partition.num_clusters(),
        "controls": p.ds.data.controls.k(),
        "control_names": p.ds.control_names,
        "recipe": p.recipe_label,
        "mode": p.mode,
        "method": p.method,
        "trace": a.trace(),
        "frobenius_sq": {"diagonal": diag_sq, "off_diagonal": offdiag_sq},
        "estimate": est,
        "beta_iv_form": iv,
        "se_jackknife": v_jk.sqrt() / scale,
        "se_cluster_robust": v_cr.sqrt() / scale,
    }))
}

fn cmd_infer(args: InferArgs) -> Result<()> {
    let p = prepare(&args.data)?;
    let proj = build_projection(p.ds.data.controls.clone())?;
    let a = build_astar(&proj, &p.exclusion, p.mode, p.method)?;
    let est = estimate(&p.ds.data, &a)?;
    let test = ar_test(&p.ds.data, &a, args.beta0, args.alpha)?;
    let set = invert_ar(&p.ds.data, &a, args.alpha)?;
    let stat = numerator_stat(&p.ds.data, &a, est.beta)?;
    let se = jackknife_variance(&stat).sqrt() / est.denominator.abs();

    if let Some(path) = &args.ar_curve {
        if args.curve_points < 2 {
            bail!("--curve-points must be at least 2");
        }
        let half = if se.is_finite() && se > 0.0 {
            10.0 * se
        } else {
            1.0
        };
        let (lo, hi) = (est.beta - half, est.beta + half);
        let mut out = fs::File::create(path)
            .with_context(|| format!("cannot create {}", path.display()))?;
        writeln!(out, "beta0,statistic,p_value,reject")?;
        for i in 0..args.curve_points {
            let b = lo + (hi - lo) * i as f64 / (args.curve_points - 1) as f64;
            let t = ar_test(&p.ds.data, &a, b, args.alpha)?;
            writeln!(
                out,
                "{b},{},{},{}",
                t.statistic,
                t.p_value,
                u8::from(t.reject)
            )?;
        }
    }

    print_json(&json!({
        "n": p.ds.data.n(),
        "clusters": p.ds.data.partition.num_clusters(),
        "recipe": p.recipe_label,
        "mode": p.mode,
        "method": p.method,
        "estimate": est,
        "se_jackknife": se,
        "test": test,
        "confidence_set": set,
        "ar_curve": args.ar_curve.as_ref().map(|p| p.display().to_string()),
    }))
}

fn cmd_diagnose(args: DiagnoseArgs) -> Result<()> {
    let p = prepare(&args.data)?;
    let proj = build_projection(p.ds.data.controls.clone())?;
    let a = build_astar(&proj, &p.exclusion, p.mode, p.method)?;
    let violations = a.validate_class(proj.controls(), &p.exclusion);
    let per_cluster = a.per_cluster_trace();
    let (diag_sq, offdiag_sq) = a.frobenius_sq_split();
    let sizes = p.ds.data.partition.sizes();
    let ratios = negligibility_ratios(&p.ds.data.partition, &ShockModel::default(), &proj);

    if let Some(path) = &args.triplets {
        let file = fs::File::create(path)
            .with_context(|| format!("cannot create {}", path.display()))?;
        a.write_triplets_csv(file, args.threshold)?;
    }

    let min_trace = per_cluster.iter().cloned().fold(f64::INFINITY, f64::min);
    let max_trace = per_cluster.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    print_json(&json!({
        "n": p.ds.data.n(),
        "clusters": p.ds.data.partition.num_clusters(),
        "cluster_sizes": {
            "min": sizes.iter().min(),
            "max": sizes.iter().max(),
        },
        "controls": p.ds.data.controls.k(),
        "recipe": p.recipe_label,
        "mode": p.mode,
        "method": p.method,
        "trace": a.trace(),
        "trace_unrestricted": proj.trace(),
        "per_cluster_trace": {"min": min_trace, "max": max_trace, "values": per_cluster},
        "frobenius_sq": {"diagonal": diag_sq, "off_diagonal": offdiag_sq},
        "excluded_within_cluster_share": p.exclusion.zero_share_within(),
        "class_violations": {
            "annihilation": violations.annihilation,
            "exclusion": violations.exclusion,
        },
        "negligibility_iid_unit_shocks": ratios,
        "triplets": args.triplets.as_ref().map(|p| p.display().to_string()),
    }))
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let text = fs::read_to_string(&args.config)
        .with_context(|| format!("cannot read config {}", args.config.display()))?;
    let config = McConfig::from_toml(&text)?;
    let (report, outcomes) = run_monte_carlo(config)?;
    if let Some(path) = &args.reps_csv {
        let file = fs::File::create(path)
            .with_context(|| format!("cannot create {}", path.display()))?;
        write_rep_csv(file, &outcomes)?;
    }
    let value = serde_json::to_value(&report)?;
    if let Some(path) = &args.out {
        fs::write(path, serde_json::to_string_pretty(&value)?)
            .with_context(|| format!("cannot write {}", path.display()))?;
    }
    print_json(&value)
}
