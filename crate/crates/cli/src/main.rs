use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use ischemia_core::forward::BoundaryTrace;
use ischemia_core::inclusion::InnerConductivity;
use ischemia_core::mesh::io::{format_mesh, read_mesh};
use ischemia_core::output::{
    write_json_file, write_rate_csv_file, write_trace_csv_file, write_vtk_file, write_vtk_series,
};
use ischemia_core::scenario::{run_reconstruction, write_scenario};
use ischemia_core::*;

/// Detect a small ischemic inclusion from boundary potentials.
#[derive(Parser)]
#[command(name = "ischemia", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build or inspect meshes.
    #[command(subcommand)]
    Mesh(MeshCommand),
    /// Solve the background (or perturbed) problem and export u.
    Forward(ForwardArgs),
    /// Synthesize measurements from the scenario's inclusion.
    Synth(SynthArgs),
    /// Run the one-shot reconstruction on a measurement file.
    Reconstruct(ReconstructArgs),
    /// Numerical validation studies.
    #[command(subcommand)]
    Validate(ValidateCommand),
}

#[derive(Subcommand)]
enum MeshCommand {
    /// Write the scenario's mesh in the native format.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Print mesh statistics.
    Info {
        #[arg(long, conflicts_with = "scenario", required_unless_present = "scenario")]
        mesh: Option<PathBuf>,
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum ValidateCommand {
    /// Asymptotic rate study over the scenario's eps list.
    Rates {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// Scenario file (TOML).
    #[arg(long)]
    scenario: PathBuf,
    /// Output directory; defaults to the scenario's `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the number of time steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Override the final time.
    #[arg(long)]
    t_final: Option<f64>,
}

#[derive(Args)]
struct ForwardArgs {
    #[command(flatten)]
    common: Common,
    /// Solve with the scenario's inclusion instead of the background.
    #[arg(long)]
    perturbed: bool,
    /// Write every k-th frame to VTK.
    #[arg(long, default_value_t = 10)]
    frame_stride: usize,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    /// Noise level p.
    #[arg(long)]
    noise: Option<f64>,
    /// Number of measurement points.
    #[arg(long)]
    points: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ReconstructArgs {
    #[command(flatten)]
    common: Common,
    /// Measurement file written by `synth`.
    #[arg(long)]
    data: PathBuf,
    /// Assumed inclusion conductivity.
    #[arg(long)]
    k1: Option<f64>,
    /// Also write the adjoint W every k-th frame.
    #[arg(long)]
    adjoint_stride: Option<usize>,
}

/// A failed check rather than a crash; exits with status 2.
#[derive(Debug)]
struct ValidationFailure(String);

impl std::fmt::Display for ValidationFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ValidationFailure {}

struct Loaded {
    scenario: Scenario,
    base_dir: PathBuf,
    out_dir: PathBuf,
}

impl Common {
    fn load(&self) -> Result<Loaded> {
        let mut scenario =
            load_scenario(&self.scenario).with_context(|| format!("loading {}", self.scenario.display()))?;
        if let Some(n) = self.steps {
            scenario.grid.steps = n;
        }
        if let Some(t) = self.t_final {
            scenario.grid.t_final = t;
        }
        scenario.validate()?;
        let base_dir = self.scenario.parent().map(Path::to_path_buf).unwrap_or_default();
        let out_dir = self.out.clone().unwrap_or_else(|| scenario.output.dir.clone());
        std::fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
        Ok(Loaded {
            scenario,
            base_dir,
            out_dir,
        })
    }
}

impl Loaded {
    fn mesh(&self) -> Result<Mesh> {
        Ok(self.scenario.build_mesh(&self.base_dir)?)
    }

    fn header(&self) -> FileHeader {
        FileHeader::new(self.scenario.hash())
    }

    /// Keep the effective scenario next to the outputs.
    fn echo(&self) -> Result<()> {
        write_scenario(&self.out_dir.join("scenario.toml"), &self.scenario)?;
        Ok(())
    }
}

fn mesh_info(mesh: &Mesh) {
    let (mean, max) = mesh.edge_length_stats();
    println!("vertices        {}", mesh.n_vertices());
    println!("tetrahedra      {}", mesh.n_tets());
    println!("boundary faces  {}", mesh.boundary_faces().len());
    for tag in [FaceTag::Endocardium, FaceTag::Epicardium, FaceTag::Base, FaceTag::Other] {
        println!("  {:<13} {}", tag.as_str(), mesh.tag_count(tag));
    }
    println!("volume          {:.6}", mesh.total_volume());
    println!("edge length     mean {mean:.4} max {max:.4}");
    println!("diameter        {:.4}", mesh.diameter());
    println!("hash            {}", mesh.content_hash());
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Mesh(MeshCommand::Gen { common }) => {
            let l = common.load()?;
            let mesh = l.mesh()?;
            let path = l.out_dir.join("mesh.txt");
            let text = format!("# {}\n{}", l.header().line(), format_mesh(&mesh));
            std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
            mesh_info(&mesh);
            println!("wrote {}", path.display());
        }
        Command::Mesh(MeshCommand::Info { mesh, scenario }) => {
            let mesh = match (mesh, scenario) {
                (Some(path), _) => read_mesh(&path).with_context(|| format!("reading {}", path.display()))?,
                (None, Some(path)) => {
                    let s = load_scenario(&path)?;
                    s.build_mesh(path.parent().unwrap_or(Path::new("")))?
                }
                (None, None) => unreachable!("clap requires one of --mesh, --scenario"),
            };
            mesh_info(&mesh);
        }
        Command::Forward(args) => {
            let l = args.common.load()?;
            let s = &l.scenario;
            let mesh = l.mesh()?;
            let k0 = s.conductivity.field(&mesh)?;
            let u0 = s.initial.evaluate(&mesh)?;
            let opts = s.forward_options();
            let u = if args.perturbed {
                let inc = s
                    .inclusion
                    .ok_or_else(|| ValidationFailure("--perturbed needs an [inclusion] section".into()))?;
                let set = classify_elements(&mesh, &inc);
                if let Some(w) = set.warning() {
                    eprintln!("warning: {w}");
                }
                let inner = InnerConductivity::for_background(&s.conductivity, inc.k1);
                solve_perturbed(&mesh, &k0, &s.ionic, &u0, &s.grid, &set, inner, &opts)?
            } else {
                solve_background(&mesh, &k0, &s.ionic, &u0, &s.grid, &opts)?
            };
            let header = l.header();
            let files = write_vtk_series(&l.out_dir, "u", &mesh, "u", &u, args.frame_stride, &header)?;
            let trace = boundary_trace(&u, &s.gamma(&mesh)?)?;
            write_trace_csv_file(&l.out_dir.join("trace_u.csv"), &mesh, &trace, &header)?;
            l.echo()?;
            let (lo, hi) = u.range();
            println!("u range [{lo:.6}, {hi:.6}] over {} steps", s.grid.steps);
            println!("wrote {} VTK frames and trace_u.csv to {}", files.len(), l.out_dir.display());
        }
        Command::Synth(args) => {
            let mut l = args.common.load()?;
            let m = &mut l.scenario.measurement;
            if let Some(p) = args.noise {
                m.noise = p;
            }
            if args.points.is_some() {
                m.points = args.points;
            }
            if args.seed.is_some() {
                m.seed = args.seed;
            }
            l.scenario.validate()?;
            let mesh = l.mesh()?;
            let data = synthesize_measurements(&l.scenario, &mesh)?;
            let path = l.out_dir.join("measurements.json");
            data.write(&path)?;
            let trace = BoundaryTrace {
                grid: data.grid,
                nodes: data.nodes.clone(),
                values: data.values.clone(),
            };
            write_trace_csv_file(&l.out_dir.join("trace_measured.csv"), &mesh, &trace, &l.header())?;
            l.echo()?;
            println!(
                "{} nodes x {} frames, noise {}, refined {}",
                data.nodes.len(),
                data.grid.n_frames(),
                data.noise.level,
                data.refined
            );
            println!("wrote {}", path.display());
        }
        Command::Reconstruct(args) => {
            let mut l = args.common.load()?;
            if args.k1.is_some() {
                l.scenario.reconstruction.k1 = args.k1;
            }
            l.scenario.validate()?;
            let mesh = l.mesh()?;
            let data = MeasurementSet::read(&args.data).with_context(|| format!("reading {}", args.data.display()))?;
            let result = run_reconstruction(&l.scenario, &mesh, &data)?;
            let header = l.header();
            write_json_file(&l.out_dir.join("report.json"), &result.report, &header)?;
            write_vtk_file(&l.out_dir.join("G.vtk"), &mesh, &[("G", &result.g)], &header)?;
            if let Some(stride) = args.adjoint_stride {
                write_vtk_series(&l.out_dir, "W", &mesh, "W", &result.w, stride, &header)?;
            }
            l.echo()?;
            let r = &result.report;
            let p = r.argmin_global.point();
            println!("J      {:.6e}", r.j);
            println!("min G  {:.6e} at vertex {} ({:.4}, {:.4}, {:.4})", r.min_g, r.argmin_global.vertex, p.x, p.y, p.z);
            if let Some(sep) = &r.argmin_separated {
                let q = sep.point();
                println!(
                    "separated argmin (d >= {}) at vertex {} ({:.4}, {:.4}, {:.4})",
                    r.separation, sep.vertex, q.x, q.y, q.z
                );
            }
            for w in &r.warnings {
                eprintln!("warning: {w}");
            }
            println!("wrote report.json and G.vtk to {}", l.out_dir.display());
        }
        Command::Validate(ValidateCommand::Rates { common }) => {
            let l = common.load()?;
            let mesh = l.mesh()?;
            let input = l.scenario.asymptotics_input(&mesh)?;
            let table = asymptotics_study(&mesh, &input, &l.scenario.study.eps)?;
            let header = l.header();
            write_rate_csv_file(&l.out_dir.join("rates.csv"), &table, &header)?;
            write_json_file(&l.out_dir.join("rates.json"), &table, &header)?;
            l.echo()?;
            println!("{:>8} {:>8} {:>11} {:>11} {:>11} {:>9}", "eps", "elements", "L2H1", "L2L2", "bf", "deviation");
            for r in &table.rows {
                println!(
                    "{:>8.4} {:>8} {:>11.4e} {:>11.4e} {:>11.4e} {:>9.4}",
                    r.eps, r.elements, r.l2_h1, r.l2_l2, r.boundary_functional, r.deviation
                );
                if let Some(w) = &r.warning {
                    eprintln!("warning: eps {}: {w}", r.eps);
                }
            }
            println!(
                "slopes: LinfL2 {:.3}  L2H1 {:.3}  L2L2 {:.3}",
                table.slope_linf_l2, table.slope_l2_h1, table.slope_l2_l2
            );
            let mut failures = Vec::new();
            if table.slope_l2_h1 < 0.45 {
                failures.push(format!("L2H1 slope {:.3} < 0.45", table.slope_l2_h1));
            }
            if table.slope_l2_l2 < 0.55 {
                failures.push(format!("L2L2 slope {:.3} < 0.55", table.slope_l2_l2));
            }
            if let Some(last) = table.rows.last().filter(|r| r.deviation > 0.2) {
                failures.push(format!("final deviation {:.3} > 0.2", last.deviation));
            }
            if !table.deviation_monotone {
                failures.push("deviation is not monotone in eps".into());
            }
            if table.rows.iter().any(|r| r.warning.is_some()) {
                failures.push("some radii are not resolved by the mesh".into());
            }
            if !failures.is_empty() {
                return Err(ValidationFailure(failures.join("; ")).into());
            }
            println!("rate checks passed");
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ValidationFailure>().is_some() || err.downcast_ref::<clap::Error>().is_some() {
        return 2;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Parse { .. } | Error::Invalid(_) | Error::Mesh(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
