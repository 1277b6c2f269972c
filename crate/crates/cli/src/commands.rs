use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::Args;
use rayon::prelude::*;

use spinodoid::dataset::{
    header_line, params_key, read_lines, read_params, record_seed, simulate_record, to_json_line, write_params,
    DATASET_SCHEMA,
};
use spinodoid::design::{solve_all, verify_design, DesignReport, ProblemSpec};
use spinodoid::geometry::generate_seeded;
use spinodoid::nalgebra::Vector3;
use spinodoid::sampling::{build_dataset_params, type_counts, SampleSpace, SamplingPlan};
use spinodoid::training::{evaluate, train_multi_restart};
use spinodoid::{
    Dataset, ElasticityTensor, Error, GeometryConfig, Materials, RodriguesAngles, SolverConfig, StructureParams,
    SurrogateModel, TrainConfig,
};

/// Invalid argument combinations that clap cannot express.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// 2 usage, 3 data/schema/io, 4 numerical failure.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::NotSymmetric(_)
                | Error::SingularStiffness(_)
                | Error::RejectionBudget { .. }
                | Error::NoConvergence { .. }
                | Error::DegenerateGrid(_)
                | Error::AllRestartsFailed(_)
                | Error::Infeasible
                | Error::Domain(_) => 4,
                _ => 3,
            };
        }
    }
    3
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let f = File::create(path).map_err(Error::from).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(Error::from).with_context(|| format!("opening {}", path.display()))
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::load(path).with_context(|| format!("reading {}", path.display()))
}

fn load_model(path: &Path) -> Result<SurrogateModel> {
    SurrogateModel::load(path).with_context(|| format!("reading {}", path.display()))
}

/// Comma-separated numbers, e.g. `20,20,20,0.5`.
fn parse_list(text: &str, n: usize, what: &str) -> Result<Vec<f64>> {
    let values = text
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| usage(format!("{what}: {e}")))?;
    if values.len() != n {
        return Err(usage(format!("{what}: expected {n} comma-separated values, got {}", values.len())));
    }
    Ok(values)
}

fn parse_structure(text: &str) -> Result<StructureParams> {
    let v = parse_list(text, 4, "--params")?;
    Ok(StructureParams::from_slice(&v)?)
}

fn parse_angles(text: &str) -> Result<RodriguesAngles> {
    let v = parse_list(text, 3, "--q")?;
    Ok(RodriguesAngles::from_degrees(v[0], v[1], v[2]))
}

fn csv_header(w: &mut impl Write, invocation: &str, columns: &str) -> Result<()> {
    writeln!(w, "# {invocation}")?;
    writeln!(w, "{columns}")?;
    Ok(())
}

fn default_resolution() -> usize {
    GeometryConfig::default().resolution
}

fn default_waves() -> usize {
    GeometryConfig::default().n_waves
}

fn default_beta() -> f64 {
    GeometryConfig::default().wavenumber
}

// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub count: u64,
    #[arg(long, default_value = "tri", value_parser = ["tri", "full"])]
    pub space: String,
    #[arg(long, default_value_t = 1.6)]
    pub bias_theta: f64,
    #[arg(long, default_value_t = 1.6)]
    pub bias_rho: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_sample(a: &SampleArgs, invocation: &str) -> Result<()> {
    if !(a.bias_theta >= 1.0 && a.bias_rho >= 1.0) {
        return Err(usage("bias exponents must be at least 1"));
    }
    let space: SampleSpace = a.space.parse()?;
    let plan = SamplingPlan {
        n_samples: a.count as usize,
        bias_theta: a.bias_theta,
        bias_rho: a.bias_rho,
        space,
        seed: a.seed,
    };
    let params = build_dataset_params(&plan)?;
    let mut w = create(&a.out)?;
    write_params(&mut w, &params, invocation)?;
    w.flush()?;
    let (cubic, columnar, lamellar) = type_counts(params.len());
    println!("wrote {} parameter sets: {cubic} cubic, {columnar} columnar, {lamellar} lamellar", params.len());
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct HomogenizeArgs {
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long, env = "SPINODOID_RESOLUTION", default_value_t = default_resolution())]
    pub resolution: usize,
    #[arg(long, default_value_t = default_waves())]
    pub waves: usize,
    #[arg(long, default_value_t = default_beta())]
    pub beta: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_homogenize(a: &HomogenizeArgs, invocation: &str) -> Result<()> {
    if a.resolution < 2 || a.waves == 0 || !(a.beta > 0.0) || !(a.tol > 0.0) {
        return Err(usage("resolution must be at least 2 and waves, beta and tol positive"));
    }
    let params = read_params(open(&a.params)?).with_context(|| format!("reading {}", a.params.display()))?;
    let geometry = GeometryConfig { resolution: a.resolution, n_waves: a.waves, wavenumber: a.beta, edge_length: 1.0 };
    let solver = SolverConfig { tolerance: a.tol, ..Default::default() };
    let materials = Materials::default();

    // Resume: every parameter tuple already on file is skipped, failed or not.
    let mut done: HashSet<String> = HashSet::new();
    let resuming = a.out.exists();
    if resuming {
        let lines = read_lines(open(&a.out)?).with_context(|| format!("reading {}", a.out.display()))?;
        done.extend(lines.iter().map(|(_, l)| params_key(&l.params())));
    }
    let mut pending = Vec::new();
    for p in &params {
        if done.insert(params_key(p)) {
            pending.push(*p);
        }
    }
    let skipped = params.len() - pending.len();

    let mut w = if resuming {
        let f = OpenOptions::new().append(true).open(&a.out).map_err(Error::from)?;
        BufWriter::new(f)
    } else {
        let mut w = create(&a.out)?;
        writeln!(w, "{}", header_line(DATASET_SCHEMA, invocation))?;
        w.flush()?;
        w
    };

    let chunk = rayon::current_num_threads().max(1);
    let (mut ok, mut failed) = (0usize, 0usize);
    for (c, batch) in pending.chunks(chunk).enumerate() {
        let lines: Vec<_> = batch
            .par_iter()
            .map(|p| simulate_record(p, &geometry, &materials, &solver, record_seed(a.seed, p)))
            .collect();
        for (k, line) in lines.iter().enumerate() {
            writeln!(w, "{}", to_json_line(line)?)?;
            match &line.error {
                Some(e) => {
                    failed += 1;
                    eprintln!("record {} {}: {e}", c * chunk + k + 1, line.params());
                }
                None => ok += 1,
            }
        }
        w.flush()?;
        eprintln!("{}/{} records", (c * chunk + batch.len()), pending.len());
    }
    println!("{ok} homogenized, {failed} failed, {skipped} already present");
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    pub restarts: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub reg: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Use only the first N records.
    #[arg(long)]
    pub head: Option<usize>,
    /// Objective evaluations per restart.
    #[arg(long, default_value_t = 20_000)]
    pub max_evals: usize,
    #[arg(long)]
    pub out_model: PathBuf,
    #[arg(long)]
    pub log: Option<PathBuf>,
}

pub fn cmd_train(a: &TrainArgs, invocation: &str) -> Result<()> {
    if !(a.reg >= 0.0) || a.max_evals == 0 {
        return Err(usage("--reg must be non-negative and --max-evals positive"));
    }
    let mut data = load_dataset(&a.data)?;
    if let Some(n) = a.head {
        if n > data.len() {
            return Err(usage(format!("--head {n} exceeds the {} records available", data.len())));
        }
        data = data.head(n);
    }
    let cfg = TrainConfig {
        lambda_reg: a.reg,
        n_restarts: a.restarts as usize,
        max_evaluations: a.max_evals,
        seed: a.seed,
        ..Default::default()
    };
    let (mut model, outcomes) = train_multi_restart(&data, &cfg)?;
    model.metadata.invocation = invocation.to_string();
    let mut w = create(&a.out_model)?;
    model.write(&mut w)?;
    w.flush()?;
    if let Some(log) = &a.log {
        let mut w = create(log)?;
        writeln!(w, "# {invocation}")?;
        writeln!(w, "# index seed iterations evaluations termination loss")?;
        for o in &outcomes {
            writeln!(w, "{}", o.log_line())?;
        }
        w.flush()?;
    }
    let failed = outcomes.iter().filter(|o| o.failed()).count();
    println!(
        "trained on {} records: loss {:.6e} (data {:.6e}), {failed} of {} restarts failed",
        data.len(),
        model.metadata.final_loss,
        model.metadata.final_data_loss,
        outcomes.len()
    );
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out_csv: Option<PathBuf>,
}

pub fn cmd_eval(a: &EvalArgs, invocation: &str) -> Result<()> {
    let model = load_model(&a.model)?;
    let data = load_dataset(&a.data)?;
    let report = evaluate(&model, &data)?;
    if let Some(path) = &a.out_csv {
        let mut w = create(path)?;
        csv_header(&mut w, invocation, "target,predicted,record_id,mandel_index")?;
        for p in &report.pairs {
            writeln!(w, "{:e},{:e},{},{}", p.target, p.predicted, p.record, 6 * p.row + p.col)?;
        }
        w.flush()?;
    }
    let n = report.relative_errors.len() as f64;
    let mean = report.relative_errors.iter().sum::<f64>() / n;
    let max = report.relative_errors.iter().copied().fold(0.0, f64::max);
    println!("loss {:.6e}", report.loss);
    println!("relative error mean {mean:.4e} max {max:.4e} over {} records", data.len());
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct DesignArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub problem: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the problem file's start count.
    #[arg(long)]
    pub starts: Option<usize>,
    /// Overrides the problem file's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Regenerate and homogenize the selected design.
    #[arg(long)]
    pub verify: bool,
    #[arg(long, env = "SPINODOID_RESOLUTION", default_value_t = default_resolution())]
    pub resolution: usize,
    #[arg(long, default_value_t = default_waves())]
    pub waves: usize,
    /// Geometry seed of the verification run.
    #[arg(long, default_value_t = 0)]
    pub verify_seed: u64,
}

pub fn cmd_design(a: &DesignArgs, invocation: &str) -> Result<()> {
    let model = load_model(&a.model)?;
    let spec = ProblemSpec::load(&a.problem).with_context(|| format!("reading {}", a.problem.display()))?;
    let base = a.problem.parent().unwrap_or(Path::new("."));
    let problem = spec.build(base).with_context(|| format!("building {}", a.problem.display()))?;
    let mut opts = spec.options();
    if let Some(s) = a.starts {
        if s == 0 {
            return Err(usage("--starts must be at least 1"));
        }
        opts.starts = s;
    }
    if let Some(seed) = a.seed {
        opts.seed = seed;
    }
    let outcomes = solve_all(&problem, &model, &opts);
    let mut report = DesignReport::new(&problem, &opts, &outcomes);
    report.invocation = invocation.to_string();

    if let (true, Some(d)) = (a.verify, report.design.as_ref()) {
        let params = StructureParams { theta: d.theta, rho: d.rho };
        let angles = RodriguesAngles::from_degrees(d.rodrigues[0], d.rodrigues[1], d.rodrigues[2]);
        let geometry = GeometryConfig { resolution: a.resolution, n_waves: a.waves, ..Default::default() };
        let v = verify_design(
            &problem,
            &params,
            angles,
            &geometry,
            &Materials::default(),
            &SolverConfig::default(),
            a.verify_seed,
        )?;
        report.verification = Some(v);
    }

    let mut w = create(&a.out)?;
    writeln!(w, "{}", report.to_json()?)?;
    w.flush()?;

    let Some(d) = &report.design else {
        return Err(anyhow!(Error::Infeasible)).context(format!("report written to {}", a.out.display()));
    };
    println!(
        "{}: theta ({:.3}, {:.3}, {:.3}) rho {:.4} rodrigues ({:.3}, {:.3}, {:.3}) objective {:.6e} violation {:.2e}",
        report.selected.unwrap_or("-"),
        d.theta[0],
        d.theta[1],
        d.theta[2],
        d.rho,
        d.rodrigues[0],
        d.rodrigues[1],
        d.rodrigues[2],
        d.objective,
        d.violation
    );
    if let Some(v) = &report.verification {
        match v.deviation {
            Some(dev) => println!("verification deviation {:.4}", dev),
            None => println!(
                "verification objective {:.6e} violation {:.2e}",
                v.assessment.objective,
                v.assessment.violation()
            ),
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct SurfaceArgs {
    #[arg(long, conflicts_with = "tensor_file", requires = "params")]
    pub model: Option<PathBuf>,
    /// `t1,t2,t3,rho` in degrees.
    #[arg(long)]
    pub params: Option<String>,
    /// Dataset file; the tensor of record `--record` is used.
    #[arg(long, required_unless_present = "model")]
    pub tensor_file: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub record: usize,
    /// Rodrigues angles `phi,omega,eps` in degrees.
    #[arg(long, default_value = "0,0,0", allow_hyphen_values = true)]
    pub q: String,
    #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(1..))]
    pub samples: u64,
    #[arg(long)]
    pub out_csv: PathBuf,
}

/// `n` nearly uniform unit vectors on the golden-angle spiral.
pub fn fibonacci_sphere(n: usize) -> Vec<Vector3<f64>> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (2 * i + 1) as f64 / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden * i as f64;
            Vector3::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect()
}

pub fn cmd_surface(a: &SurfaceArgs, invocation: &str) -> Result<()> {
    let q = parse_angles(&a.q)?;
    let c = match (&a.model, &a.tensor_file) {
        (Some(model), None) => {
            let s = parse_structure(a.params.as_deref().unwrap_or_default())?;
            load_model(model)?.forward_rotated(&s, q)?
        }
        (None, Some(path)) => {
            let data = load_dataset(path)?;
            let record = data
                .records
                .get(a.record)
                .ok_or_else(|| usage(format!("--record {} but the file holds {} records", a.record, data.len())))?;
            record.tensor.rotated(&spinodoid::tensor::rodrigues(q.phi, q.omega, q.eps))
        }
        _ => return Err(usage("give either --model with --params or --tensor-file")),
    };
    let mut w = create(&a.out_csv)?;
    csv_header(&mut w, invocation, "dx,dy,dz,E")?;
    for d in fibonacci_sphere(a.samples as usize) {
        let e = c.directional_modulus(&d)?;
        writeln!(w, "{:e},{:e},{:e},{:e}", d[0], d[1], d[2], e)?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Values of the parameters held fixed, e.g. `t2=30,t3=0,rho=0.5`.
    #[arg(long)]
    pub fix: String,
    #[arg(long, default_value = "t1", value_parser = ["t1", "t2", "t3", "rho"])]
    pub vary: String,
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(2..))]
    pub steps: u64,
    #[arg(long)]
    pub out_csv: PathBuf,
}

const PARAM_NAMES: [&str; 4] = ["t1", "t2", "t3", "rho"];

fn param_index(name: &str) -> Option<usize> {
    PARAM_NAMES.iter().position(|&n| n == name)
}

pub fn cmd_sweep(a: &SweepArgs, invocation: &str) -> Result<()> {
    let vary = param_index(&a.vary).expect("clap restricts --vary");
    let mut values: [Option<f64>; 4] = [None; 4];
    for item in a.fix.split(',').filter(|s| !s.trim().is_empty()) {
        let (k, v) = item.split_once('=').ok_or_else(|| usage(format!("--fix: `{item}` is not name=value")))?;
        let i = param_index(k.trim()).ok_or_else(|| usage(format!("--fix: unknown parameter `{}`", k.trim())))?;
        if i == vary {
            return Err(usage(format!("--fix: `{}` is the varied parameter", k.trim())));
        }
        values[i] = Some(v.trim().parse().map_err(|e| usage(format!("--fix {}: {e}", k.trim())))?);
    }
    for (i, v) in values.iter().enumerate() {
        if i != vary && v.is_none() {
            return Err(usage(format!("--fix must give {}", PARAM_NAMES[i])));
        }
    }
    let (lo, hi) = if vary == 3 { (0.3, 1.0) } else { (15.0, 90.0) };
    let model = load_model(&a.model)?;
    let mut w = create(&a.out_csv)?;
    csv_header(&mut w, invocation, &format!("{},C1111,C2222,C3333", PARAM_NAMES[vary]))?;
    let steps = a.steps as usize;
    for k in 0..steps {
        let x = lo + (hi - lo) * k as f64 / (steps - 1) as f64;
        let mut s = [0.0; 4];
        for (i, v) in s.iter_mut().enumerate() {
            *v = if i == vary { x } else { values[i].unwrap_or_default() };
        }
        let params = StructureParams { theta: [s[0], s[1], s[2]], rho: s[3] };
        let c: ElasticityTensor = model.forward(&params)?;
        let m = c.mandel();
        writeln!(w, "{:e},{:e},{:e},{:e}", x, m[(0, 0)], m[(1, 1)], m[(2, 2)])?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct GeometryArgs {
    /// `t1,t2,t3,rho` in degrees.
    #[arg(long)]
    pub params: String,
    #[arg(long, env = "SPINODOID_RESOLUTION", default_value_t = default_resolution())]
    pub resolution: usize,
    #[arg(long, default_value_t = default_waves())]
    pub waves: usize,
    #[arg(long, default_value_t = default_beta())]
    pub beta: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_geometry(a: &GeometryArgs) -> Result<()> {
    let s = parse_structure(&a.params)?;
    if a.resolution < 2 || a.waves == 0 || !(a.beta > 0.0) {
        bail!(usage("resolution must be at least 2 and waves and beta positive"));
    }
    let cfg = GeometryConfig { resolution: a.resolution, n_waves: a.waves, wavenumber: a.beta, edge_length: 1.0 };
    let grid = generate_seeded(&s, &cfg, a.seed)?;
    let mut w = create(&a.out)?;
    grid.write_spnv(&mut w)?;
    w.flush()?;
    println!("{}^3 voxels, solid fraction {:.4}", a.resolution, grid.solid_fraction());
    Ok(())
}
