use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;

use gmr_core::bench::{run_bench, BenchConfig, BenchMethod};
use gmr_core::conv::{gmr_conv_with_basis, ConvConfig};
use gmr_core::equiv::{angle_sweep, InputSpec};
use gmr_core::gmr_kernel::{
    build_nearest_ring_basis, default_rings, materialize_kernel, parameter_count, ring_geometry, GmrLayerParams,
};
use gmr_core::io::{load_gmr, save_gmr};
use gmr_core::net::{save_network, DemoConfig};
use gmr_core::Tensor;

use crate::{Failure, Format, Global};

type CmdResult = Result<(), Failure>;

fn emit(g: &Global, text: &str) -> CmdResult {
    match &g.out {
        Some(path) => fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn checked(failed: Vec<String>) -> CmdResult {
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(failed))
    }
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>, Failure> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse().map_err(|_| Failure::Usage(format!("bad {what} entry {p:?}"))))
        .collect()
}

/// `a,b,c` or an inclusive range `start:stop:step`.
pub fn parse_angles(s: &str) -> Result<Vec<f64>, Failure> {
    let parts: Vec<&str> = s.split(':').collect();
    match parts.as_slice() {
        [_] => parse_list(s, "angle"),
        [a, b, c] => {
            let (a, b, c): (f64, f64, f64) = match (a.parse(), b.parse(), c.parse()) {
                (Ok(a), Ok(b), Ok(c)) => (a, b, c),
                _ => return Err(Failure::Usage(format!("bad angle range {s:?}"))),
            };
            if c.is_nan() || c <= 0.0 || b < a {
                return Err(Failure::Usage(format!("angle range {s:?} needs step > 0 and stop >= start")));
            }
            let count = ((b - a) / c + 1e-9).floor() as usize + 1;
            Ok((0..count).map(|i| a + c * i as f64).collect())
        }
        _ => Err(Failure::Usage(format!("bad angle list {s:?}"))),
    }
}

/// `C` for a square layer or `CINxCOUT`.
fn parse_channel_pair(s: &str) -> Result<(usize, usize), Failure> {
    let bad = || Failure::Usage(format!("bad channel entry {s:?}"));
    match s.split_once('x') {
        Some((a, b)) => Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?)),
        None => {
            let c = s.trim().parse().map_err(|_| bad())?;
            Ok((c, c))
        }
    }
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Kernel widths, comma separated
    #[arg(long = "k", default_value = "3,5,7,9,11")]
    ks: String,
    #[arg(long, default_value_t = 128)]
    channels: usize,
    #[arg(long, default_value_t = 64)]
    spatial: usize,
    #[arg(long, default_value_t = 2)]
    batch: usize,
    #[arg(long, default_value_t = 1000)]
    repeats: usize,
    #[arg(long, default_value_t = 100)]
    warmup: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Subset of direct_dense, direct_materialized_gmr, efficient_gmr
    #[arg(long, default_value = "direct_dense,direct_materialized_gmr,efficient_gmr")]
    methods: String,
}

pub fn bench(a: &BenchArgs, g: &Global) -> CmdResult {
    let methods = parse_list::<String>(&a.methods, "method")?
        .iter()
        .map(|m| {
            BenchMethod::ALL
                .into_iter()
                .find(|b| b.name() == m)
                .ok_or_else(|| Failure::Usage(format!("unknown method {m:?}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let cfg = BenchConfig {
        ks: parse_list(&a.ks, "k")?,
        batch: a.batch,
        channels: a.channels,
        spatial: a.spatial,
        repeats: a.repeats,
        warmup: a.warmup,
        seed: a.seed,
        methods,
        ..BenchConfig::default()
    };
    cfg.validate()?;
    let mut report = run_bench(&cfg, |r| {
        eprintln!(
            "{:<24} k={:<2} {:>12.1} us/call  ({:.3} s total)",
            r.method.name(),
            r.k,
            r.per_call_us,
            r.total_seconds
        )
    })?;
    eprintln!("input checksum {:.9e}", report.input_checksum);

    let mut failed = Vec::new();
    if g.check {
        for &k in &cfg.ks {
            let eff = report.get(BenchMethod::EfficientGmr, k);
            let mat = report.get(BenchMethod::DirectMaterializedGmr, k);
            if let (Some(e), Some(m)) = (eff, mat) {
                if e.total_seconds >= m.total_seconds {
                    failed.push(format!(
                        "k={k}: efficient_gmr {:.1} us/call is not faster than direct_materialized_gmr {:.1} us/call",
                        e.per_call_us, m.per_call_us
                    ));
                }
                if e.macs_per_call >= m.macs_per_call {
                    failed.push(format!("k={k}: efficient_gmr does not save multiply-adds"));
                }
            }
        }
    }
    if g.stable_output {
        report.stabilize();
    }
    let text = match g.format {
        Format::Csv => report.to_csv(),
        Format::Json => report.to_json()? + "\n",
    };
    emit(g, &text)?;
    checked(failed)
}

#[derive(Args, Debug)]
pub struct ParamsArgs {
    #[arg(long, default_value_t = 9)]
    k: usize,
    /// Ring count (default (k+1)/2)
    #[arg(long)]
    rings: Option<usize>,
    #[arg(long, default_value_t = 2)]
    dims: usize,
    /// Channel pairs: `C` or `CINxCOUT`, comma separated
    #[arg(long, default_value = "16,32,64,128,256")]
    channels: String,
}

pub fn params(a: &ParamsArgs, g: &Global) -> CmdResult {
    let geom = ring_geometry(a.k, a.rings.unwrap_or_else(|| default_rings(a.k)), a.dims)?;
    let pairs = a.channels.split(',').map(parse_channel_pair).collect::<Result<Vec<_>, _>>()?;
    let mut failed = Vec::new();
    let rows: Vec<serde_json::Value> = pairs
        .iter()
        .map(|&(c_in, c_out)| {
            let (gmr, dense) = parameter_count(c_in, c_out, &geom);
            if gmr >= dense {
                failed.push(format!("{c_in}x{c_out}: ring layer has {gmr} parameters, dense has {dense}"));
            }
            serde_json::json!({
                "c_in": c_in, "c_out": c_out, "k": geom.k, "n": geom.n, "dims": geom.dims,
                "gmr_params": gmr, "dense_params": dense, "ratio": dense as f64 / gmr as f64,
            })
        })
        .collect();
    let text = match g.format {
        Format::Json => {
            serde_json::to_string_pretty(&serde_json::json!({"schema": "gmr-params/1", "rows": rows}))? + "\n"
        }
        Format::Csv => {
            let mut s = String::from("# schema: gmr-params/1\nc_in,c_out,k,n,dims,gmr_params,dense_params,ratio\n");
            for r in &rows {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{},{:.4}",
                    r["c_in"],
                    r["c_out"],
                    r["k"],
                    r["n"],
                    r["dims"],
                    r["gmr_params"],
                    r["dense_params"],
                    r["ratio"].as_f64().unwrap_or(f64::NAN)
                );
            }
            s
        }
    };
    emit(g, &text)?;
    if g.check {
        checked(failed)
    } else {
        Ok(())
    }
}

#[derive(Args, Debug)]
pub struct EquivArgs {
    #[arg(long, default_value_t = 9)]
    k: usize,
    #[arg(long)]
    rings: Option<usize>,
    /// Input and output channels of the random layer
    #[arg(long, default_value_t = 4)]
    channels: usize,
    /// Square input extent (default max(48, 4k))
    #[arg(long)]
    spatial: Option<usize>,
    /// `a,b,c` or `start:stop:step`
    #[arg(long, default_value = "0:350:10")]
    angles: String,
    #[arg(long, default_value_t = 10)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Use the unsmoothed nearest-ring basis instead of Gaussian rings
    #[arg(long)]
    nearest: bool,
}

pub fn equiv(a: &EquivArgs, g: &Global) -> CmdResult {
    let n = a.rings.unwrap_or_else(|| default_rings(a.k));
    let params = GmrLayerParams::init(a.k, n, 2, a.channels, a.channels, a.seed)?;
    let basis = if a.nearest { build_nearest_ring_basis(&params.geometry) } else { params.basis()? };
    let cfg = ConvConfig::same(a.k, 2);
    let op = |x: &Tensor| gmr_conv_with_basis(x, &params.weights.w, &basis.rings, &cfg);
    let spec = InputSpec { batch: 1, channels: a.channels, size: a.spatial.unwrap_or((4 * a.k).max(48)) };
    let angles = parse_angles(&a.angles)?;
    let report = angle_sweep(&op, &spec, a.k, &angles, a.trials, a.seed)?;

    let mut failed = Vec::new();
    if g.check {
        for (i, &angle) in report.angle_degrees.iter().enumerate() {
            if angle.rem_euclid(90.0) == 0.0 && report.mean_error[i] > 1e-10 {
                failed.push(format!("E({angle}) = {:e} exceeds 1e-10 at a grid rotation", report.mean_error[i]));
            }
        }
    }
    let text = match g.format {
        Format::Csv => report.to_csv(),
        Format::Json => report.to_json()? + "\n",
    };
    emit(g, &text)?;
    checked(failed)
}

#[derive(Args, Debug)]
pub struct TrainDemoArgs {
    /// JSON demo configuration; missing fields take the shipped defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for report.json, gmr.net and dense.net
    #[arg(long, default_value = "demo_out")]
    dir: PathBuf,
    /// Print the default configuration and exit
    #[arg(long)]
    print_config: bool,
}

pub fn train_demo(a: &TrainDemoArgs, g: &Global) -> CmdResult {
    if a.print_config {
        return emit(g, &(serde_json::to_string_pretty(&DemoConfig::default())? + "\n"));
    }
    let cfg: DemoConfig = match &a.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)
            .map_err(|e| Failure::Usage(format!("config {}: {e}", p.display())))?,
        None => DemoConfig::default(),
    };
    let start = Instant::now();
    let (report, gmr_net, dense_net) = cfg.run()?;
    eprintln!("trained and evaluated both twins in {:.1} s", start.elapsed().as_secs_f64());

    fs::create_dir_all(&a.dir)?;
    save_network(a.dir.join("gmr.net"), &gmr_net)?;
    save_network(a.dir.join("dense.net"), &dense_net)?;
    let json = serde_json::to_string_pretty(&report)? + "\n";
    fs::write(a.dir.join("report.json"), &json)?;

    let text = match g.format {
        Format::Json => json,
        Format::Csv => {
            let mut s = String::from("# schema: gmr-train-demo/1\ntwin,parameters,train_accuracy,angle,accuracy\n");
            for (name, t) in [("gmr", &report.gmr), ("dense", &report.dense)] {
                let mut rows: Vec<(f64, f64)> = t.accuracy.iter().map(|a| (a.angle, a.accuracy)).collect();
                rows.push((45.0, t.accuracy_45));
                rows.sort_by(|a, b| a.0.total_cmp(&b.0));
                rows.dedup_by(|a, b| a.0 == b.0);
                for (angle, acc) in rows {
                    let _ = writeln!(s, "{name},{},{:.4},{angle},{acc:.4}", t.parameters, t.log.train_accuracy);
                }
            }
            s
        }
    };
    emit(g, &text)?;

    let mut failed = Vec::new();
    if g.check {
        let (g0, d0) = (report.gmr.accuracy_at(0.0).unwrap_or(0.0), report.dense.accuracy_at(0.0).unwrap_or(0.0));
        if report.gmr.min_accuracy() < g0 - 0.05 {
            failed.push(format!(
                "gmr min accuracy {:.4} below acc(0) - 0.05 = {:.4}",
                report.gmr.min_accuracy(),
                g0 - 0.05
            ));
        }
        if report.dense.accuracy_45 > d0 - 0.15 {
            failed.push(format!(
                "dense acc(45) {:.4} above acc(0) - 0.15 = {:.4}",
                report.dense.accuracy_45,
                d0 - 0.15
            ));
        }
        for (name, acc) in [("gmr", g0), ("dense", d0)] {
            if acc < 0.9 {
                failed.push(format!("{name} acc(0) {acc:.4} below 0.90"));
            }
        }
    }
    checked(failed)
}

#[derive(Args, Debug)]
pub struct InitKernelArgs {
    #[arg(long, default_value_t = 9)]
    k: usize,
    #[arg(long)]
    rings: Option<usize>,
    #[arg(long, default_value_t = 2)]
    dims: usize,
    /// `C` or `CINxCOUT`
    #[arg(long, default_value = "1")]
    channels: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output .gmr file
    #[arg(long)]
    file: PathBuf,
}

pub fn init_kernel(a: &InitKernelArgs, _g: &Global) -> CmdResult {
    let (c_in, c_out) = parse_channel_pair(&a.channels)?;
    let n = a.rings.unwrap_or_else(|| default_rings(a.k));
    let p = GmrLayerParams::init(a.k, n, a.dims, c_in, c_out, a.seed)?;
    save_gmr(&a.file, &p)?;
    eprintln!("wrote {} ({}-d, k={}, n={n}, {c_in}x{c_out})", a.file.display(), a.dims, a.k);
    Ok(())
}

#[derive(Args, Debug)]
pub struct DumpKernelArgs {
    /// .gmr file to read
    #[arg(long)]
    params: PathBuf,
    /// Ring index to print
    #[arg(long, conflicts_with = "full", required_unless_present = "full")]
    ring: Option<usize>,
    /// Print materialized kernels instead of one ring
    #[arg(long)]
    full: bool,
    /// Only this output channel (with --full)
    #[arg(long, requires = "full")]
    out_channel: Option<usize>,
    /// Only this input channel (with --full)
    #[arg(long, requires = "full")]
    in_channel: Option<usize>,
}

/// Writes a `k^dims` block as CSV rows of the last axis, with a comment
/// line before every 2-d slice of a 3-d block.
fn write_grid(s: &mut String, values: &[f64], k: usize, dims: usize) {
    for (z, slice) in values.chunks(k * k).enumerate() {
        if dims == 3 {
            let _ = writeln!(s, "# slice={z}");
        }
        for row in slice.chunks(k) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.9e}")).collect();
            let _ = writeln!(s, "{}", cells.join(","));
        }
    }
}

pub fn dump_kernel(a: &DumpKernelArgs, g: &Global) -> CmdResult {
    let p = load(&a.params)?;
    let geom = &p.geometry;
    let basis = p.basis()?;
    let mut s = format!("# schema: gmr-kernel-dump/1\n# k={} n={} dims={}\n", geom.k, geom.n, geom.dims);
    if let Some(i) = a.ring {
        if i >= geom.n {
            return Err(Failure::Usage(format!("ring {i} out of range (n = {})", geom.n)));
        }
        let _ = writeln!(s, "# ring={i} mu={} sigma={}", geom.mu[i], p.sigma.sigma()[i]);
        write_grid(&mut s, basis.ring(i), geom.k, geom.dims);
    } else {
        let kernel = materialize_kernel(&p.weights, &basis)?;
        let taps = geom.taps();
        let (c_out, c_in) = (p.c_out(), p.c_in());
        for (name, v, lim) in [("out", a.out_channel, c_out), ("in", a.in_channel, c_in)] {
            if v.is_some_and(|v| v >= lim) {
                return Err(Failure::Usage(format!("{name} channel out of range ({lim} channels)")));
            }
        }
        for o in 0..c_out {
            for i in 0..c_in {
                if a.out_channel.is_some_and(|v| v != o) || a.in_channel.is_some_and(|v| v != i) {
                    continue;
                }
                let _ = writeln!(s, "# out={o} in={i}");
                let off = (o * c_in + i) * taps;
                write_grid(&mut s, &kernel.data()[off..off + taps], geom.k, geom.dims);
            }
        }
    }
    emit(g, &s)
}

fn load(path: &Path) -> Result<GmrLayerParams, Failure> {
    load_gmr(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}
