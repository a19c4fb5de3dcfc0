//! Experiment orchestration: simulate, calibrate, reconstruct, evaluate and
//! export, driven by an [`ExperimentConfig`].
//!
//! Every array that crosses a stage boundary is rounded to single precision
//! before use, so a stage run standalone on CXT1 files reproduces the
//! in-process pipeline bit for bit.

pub mod config;
pub mod export;

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

pub use config::{CsmSource, ExperimentConfig, Method};

use crate::classic::{self, ClassicConfig};
use crate::cxt;
use crate::diffusion::NoiseSchedule;
use crate::encoding::{coil_combine, coil_expand, sos_combine, AcsRegion, CoilSensitivities, MeasuredData, SamplingMask};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsRow, Roi};
use crate::sampler;
use crate::score::{fit_linear_score, LinearScore};
use crate::simulation::{box_smooth_maps, lowres_maps, make_coil_maps, make_mask, make_phantom, synthesize_measurement, PhantomSpec};
use crate::spirit::{calibrate, PsiOperator, SpiritKernel};
use crate::tensor::{ComplexArray, RealImage};
use export::Window;

pub const FILE_TRUTH: &str = "truth.cxt";
pub const FILE_REFERENCE: &str = "reference.cxt";
pub const FILE_REF_MAPS: &str = "ref-maps.cxt";
pub const FILE_MAPS: &str = "maps.cxt";
pub const FILE_MEASUREMENT: &str = "measurement.cxt";
pub const FILE_MASK: &str = "mask.cxt";
pub const FILE_KERNEL: &str = "kernel.cxt";
pub const FILE_METRICS: &str = "metrics.tsv";
pub const FILE_METADATA: &str = "metadata.toml";

/// Pixels above this fraction of the peak define the default ROI.
pub const ROI_THRESHOLD: f64 = 0.05;

/// Fraction of the stability limit used for automatic descent steps.
pub const GD_SAFETY: f64 = 0.9;

pub fn recon_file(m: Method) -> String {
    format!("recon-{m}.cxt")
}

fn quantize_image(img: &RealImage) -> RealImage {
    img.map(|v| v as f32 as f64)
}

/// Single-precision maps before normalization, i.e. the file contents, and
/// the sensitivities every stage derives from them.
#[derive(Clone, Debug)]
pub struct StoredMaps {
    pub raw: ComplexArray,
    pub maps: CoilSensitivities,
}

impl StoredMaps {
    pub fn new(s: &CoilSensitivities) -> Result<Self> {
        let raw = s.maps().quantize_f32();
        Ok(StoredMaps { maps: CoilSensitivities::from_raw(raw.clone())?, raw })
    }
}

/// Simulation outputs as seen by the reconstruction stages.
#[derive(Clone, Debug)]
pub struct Simulation {
    pub truth: ComplexArray,
    pub reference: RealImage,
    pub ref_maps: StoredMaps,
    pub maps: StoredMaps,
    pub data: MeasuredData,
}

fn acs_region(cfg: &ExperimentConfig) -> Result<AcsRegion> {
    AcsRegion::centered(cfg.phantom.size, cfg.mask.acs)
}

/// Measurement noise is drawn from the phantom seed.
pub fn simulate(cfg: &ExperimentConfig) -> Result<Simulation> {
    let size = cfg.phantom.size;
    let truth = make_phantom(&cfg.phantom)?;
    let ref_maps = StoredMaps::new(&make_coil_maps(size, cfg.coils.count, cfg.coils.seed)?)?;
    let mask = make_mask(&cfg.mask, size)?;
    let raw = synthesize_measurement(&truth, &ref_maps.maps, &mask, cfg.noise_std, cfg.phantom.seed)?;
    let data = MeasuredData::new(raw.y.quantize_f32(), mask, cfg.noise_std)?;
    let maps = match cfg.csm.source {
        CsmSource::Reference => ref_maps.clone(),
        CsmSource::BoxSmoothed => StoredMaps::new(&box_smooth_maps(&ref_maps.maps, cfg.csm.box_size)?)?,
        CsmSource::Lowres => StoredMaps::new(&lowres_maps(&data.y, data.mask.acs())?)?,
    };
    let reference = quantize_image(&RealImage::magnitude(&truth)?);
    Ok(Simulation { truth, reference, ref_maps, maps, data })
}

pub fn calibrate_kernel(cfg: &ExperimentConfig, data: &MeasuredData) -> Result<SpiritKernel> {
    let acs = data.mask.acs().extract(&data.y)?;
    let k = calibrate(&acs, cfg.spirit.kernel_size, cfg.spirit.tikhonov)?;
    SpiritKernel::from_parts(k.weights().quantize_f32(), k.tikhonov(), k.calib_residual())
}

/// Linear scores fitted on phantoms of the experiment's kind: one on coil
/// images through the reference maps, one on combined images.
pub fn fit_scores(cfg: &ExperimentConfig, ref_maps: &CoilSensitivities, sched: &NoiseSchedule) -> Result<(LinearScore, LinearScore)> {
    let sc = cfg.score;
    let images: Vec<ComplexArray> = (0..sc.n_train as u64)
        .into_par_iter()
        .map(|k| make_phantom(&PhantomSpec { seed: sc.first_seed + k, ..cfg.phantom }))
        .collect::<Result<_>>()?;
    let coils: Vec<ComplexArray> = images.iter().map(|x| coil_expand(x, ref_maps)).collect::<Result<_>>()?;
    let coil_score = fit_linear_score(&coils, sched, ref_maps, sc.ridge)?;
    let combined = LinearScore {
        mean: coil_combine(&coil_score.mean, ref_maps)?,
        v0: coil_score.v0,
        schedule: sched.clone(),
        maps: None,
    };
    Ok((coil_score, combined))
}

/// Everything a reconstruction method consumes.
pub struct Inputs {
    pub data: MeasuredData,
    pub maps: CoilSensitivities,
    pub kernel: Option<SpiritKernel>,
    pub scores: Option<(LinearScore, LinearScore)>,
    pub schedule: Option<NoiseSchedule>,
}

impl Inputs {
    pub fn prepare(cfg: &ExperimentConfig, data: MeasuredData, maps: CoilSensitivities, ref_maps: &CoilSensitivities, kernel: Option<SpiritKernel>) -> Result<Self> {
        let diffusion = cfg.methods.iter().any(|m| matches!(m, Method::SpiritDiffusion | Method::VeSde));
        let (scores, schedule) = if diffusion {
            let sched = NoiseSchedule::new(cfg.schedule)?;
            (Some(fit_scores(cfg, ref_maps, &sched)?), Some(sched))
        } else {
            (None, None)
        };
        Ok(Inputs { data, maps, kernel, scores, schedule })
    }

    fn kernel(&self, m: Method) -> Result<&SpiritKernel> {
        self.kernel
            .as_ref()
            .ok_or_else(|| Error::InvalidInput(format!("{m} needs a calibrated kernel")))
    }

    fn diffusion(&self) -> Result<(&(LinearScore, LinearScore), &NoiseSchedule)> {
        match (&self.scores, &self.schedule) {
            (Some(s), Some(t)) => Ok((s, t)),
            _ => Err(Error::InvalidInput("diffusion methods need fitted scores".into())),
        }
    }
}

/// Output of one method.
#[derive(Clone, Debug)]
pub struct Recon {
    pub method: Method,
    pub image: RealImage,
    pub trace: Option<String>,
    pub info: toml::Table,
}

pub fn reconstruct(method: Method, cfg: &ExperimentConfig, inp: &Inputs) -> Result<Recon> {
    let mut info = toml::Table::new();
    let (image, trace) = match method {
        Method::ZeroFilled => (RealImage::magnitude(&classic::zero_filled(&inp.data, &inp.maps)?)?, None),
        Method::CgSpirit | Method::GdSpirit => {
            let psi = PsiOperator::new(inp.kernel(method)?, inp.maps.spatial())?;
            let mut solver: ClassicConfig = cfg.classic.solver();
            let out = if method == Method::CgSpirit {
                classic::cg_spirit(&inp.data, &psi, &solver)?
            } else {
                if cfg.classic.auto_step {
                    let (eta, mu) = classic::safe_gd_steps(&psi, &inp.data.mask, solver.lambda_dc, GD_SAFETY)?;
                    solver.step_eta = eta;
                    solver.step_lambda = mu;
                }
                info.insert("step_eta".into(), solver.step_eta.into());
                info.insert("step_lambda".into(), solver.step_lambda.into());
                classic::gd_spirit(&inp.data, &psi, &solver)?
            };
            let last = out.trace.last().copied();
            info.insert("iterations".into(), (out.trace.len() as i64 - 1).into());
            if let Some(r) = last {
                info.insert("final_objective".into(), r.objective.into());
            }
            (sos_combine(&out.coils)?, Some(classic::trace_table(&out.trace)))
        }
        Method::SpiritDiffusion => {
            let ((coil_score, _), sched) = inp.diffusion()?;
            let psi = PsiOperator::new(inp.kernel(method)?, inp.maps.spatial())?;
            let out = sampler::pc_sample(coil_score, &inp.data, Some(&psi), &inp.maps, sched, &cfg.sampler)?;
            if let Some(r) = out.trace.last() {
                info.insert("final_residual".into(), r.residual.into());
            }
            let mut k = out.x.fft2c()?;
            inp.data.mask.apply_in_place(&mut k);
            k -= &inp.data.y;
            info.insert("output_residual".into(), (k.norm() / inp.data.y.norm()).into());
            (sos_combine(&out.x)?, Some(sampler::trace_table(&out.trace)))
        }
        Method::VeSde => {
            let ((_, combined), sched) = inp.diffusion()?;
            let out = sampler::ve_sde_sample(combined, &inp.data, &inp.maps, sched, &cfg.sampler)?;
            (RealImage::magnitude(&out.x)?, Some(sampler::trace_table(&out.trace)))
        }
    };
    Ok(Recon { method, image: quantize_image(&image), trace, info })
}

pub fn resolve_roi(cfg: &ExperimentConfig, reference: &RealImage) -> Result<Roi> {
    match cfg.roi {
        Some(r) => Ok(r),
        None => Roi::bounding_box(reference, ROI_THRESHOLD),
    }
}

/// Writes the recon tensor and its three images; returns the windows used.
pub fn export_recon(dir: &Path, cfg: &ExperimentConfig, recon: &Recon, reference: Option<&RealImage>, roi: &Roi) -> Result<toml::Table> {
    let name = recon.method.name();
    cxt::write(dir.join(recon_file(recon.method)), &metrics::to_complex(&recon.image))?;
    let mut windows = toml::Table::new();
    let w = Window::min_max(&recon.image);
    export::save_png(&dir.join(format!("recon-{name}.png")), &recon.image, w)?;
    windows.insert("recon".into(), window_value(w));
    let zroi = cfg.export.zoom.unwrap_or_else(|| export::default_zoom(roi));
    let z = export::zoom(&recon.image, &zroi, cfg.export.zoom_factor)?;
    export::save_png(&dir.join(format!("zoom-{name}.png")), &z, w)?;
    if let Some(reference) = reference {
        let err = export::error_map(reference, &recon.image)?;
        let ew = Window { lo: 0.0, hi: cfg.export.error_window };
        export::save_png(&dir.join(format!("error-{name}.png")), &err, ew)?;
        windows.insert("error".into(), window_value(ew));
    }
    Ok(windows)
}

fn window_value(w: Window) -> toml::Value {
    let mut t = toml::Table::new();
    t.insert("lo".into(), w.lo.into());
    t.insert("hi".into(), w.hi.into());
    toml::Value::Table(t)
}

/// Writes `metadata.toml`: the configuration plus a provenance table merged
/// into whatever an earlier stage recorded in the same directory.
pub fn update_metadata(dir: &Path, cfg: &ExperimentConfig, entries: toml::Table) -> Result<()> {
    let path = dir.join(FILE_METADATA);
    let mut prov = fs::read_to_string(&path)
        .ok()
        .and_then(|s| ExperimentConfig::from_toml(&s).ok())
        .and_then(|c| c.provenance)
        .unwrap_or_default();
    prov.insert("version".into(), env!("CARGO_PKG_VERSION").into());
    for (k, v) in entries {
        prov.insert(k, v);
    }
    let mut out = cfg.clone();
    out.provenance = Some(prov);
    let text = toml::to_string(&out).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

pub fn write_simulation(dir: &Path, sim: &Simulation) -> Result<()> {
    cxt::write(dir.join(FILE_TRUTH), &sim.truth)?;
    cxt::write(dir.join(FILE_REFERENCE), &metrics::to_complex(&sim.reference))?;
    cxt::write(dir.join(FILE_REF_MAPS), &sim.ref_maps.raw)?;
    cxt::write(dir.join(FILE_MAPS), &sim.maps.raw)?;
    cxt::write(dir.join(FILE_MEASUREMENT), &sim.data.y)?;
    cxt::write(dir.join(FILE_MASK), &sim.data.mask.to_array())?;
    Ok(())
}

fn simulation_entries(sim: &Simulation, roi: &Roi) -> Result<toml::Table> {
    let mut t = toml::Table::new();
    t.insert("realized_acceleration".into(), sim.data.mask.acceleration().into());
    t.insert("sampled_points".into(), (sim.data.mask.popcount() as i64).into());
    t.insert("roi".into(), toml::Value::try_from(roi).map_err(|e| Error::Config(e.to_string()))?);
    Ok(t)
}

fn kernel_entries(k: &SpiritKernel) -> toml::Table {
    let mut t = toml::Table::new();
    t.insert("calib_residual".into(), k.calib_residual().into());
    t.insert("kernel_tikhonov".into(), k.tikhonov().into());
    t
}

/// Loads the measurement written by [`write_simulation`].
pub fn read_measurement(dir: &Path, cfg: &ExperimentConfig) -> Result<MeasuredData> {
    let y = cxt::read(dir.join(FILE_MEASUREMENT))?;
    let mask = SamplingMask::from_array(&cxt::read(dir.join(FILE_MASK))?, acs_region(cfg)?)?;
    MeasuredData::new(y, mask, cfg.noise_std)
}

pub fn read_maps(path: &Path) -> Result<CoilSensitivities> {
    CoilSensitivities::from_raw(cxt::read(path)?)
}

/// Kernel weights plus the residual and regularization recorded next to them
/// in `metadata.toml`.
pub fn read_kernel(dir: &Path) -> Result<SpiritKernel> {
    let w = cxt::read(dir.join(FILE_KERNEL))?;
    let meta = fs::read_to_string(dir.join(FILE_METADATA))?;
    let prov = ExperimentConfig::from_toml(&meta)?.provenance.unwrap_or_default();
    let get = |k: &str| {
        prov.get(k)
            .and_then(|v| v.as_float())
            .ok_or_else(|| Error::Format(format!("{FILE_METADATA} lacks provenance.{k}")))
    };
    SpiritKernel::from_parts(w, get("kernel_tikhonov")?, get("calib_residual")?)
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub rows: Vec<MetricsRow>,
    pub recons: Vec<Recon>,
    pub calib_residual: Option<f64>,
    pub output_dir: PathBuf,
}

/// Full pipeline. Methods run in parallel; artifacts are written in
/// configuration order.
pub fn run_experiment(cfg: &ExperimentConfig, write_traces: bool) -> Result<RunSummary> {
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir)?;
    let sim = simulate(cfg)?;
    let roi = resolve_roi(cfg, &sim.reference)?;
    write_simulation(&dir, &sim)?;
    let mut prov = simulation_entries(&sim, &roi)?;

    let kernel = if cfg.methods.iter().any(|m| m.needs_kernel()) {
        let k = calibrate_kernel(cfg, &sim.data)?;
        cxt::write(dir.join(FILE_KERNEL), k.weights())?;
        prov.extend(kernel_entries(&k));
        Some(k)
    } else {
        None
    };
    let calib_residual = kernel.as_ref().map(|k| k.calib_residual());
    let inputs = Inputs::prepare(cfg, sim.data.clone(), sim.maps.maps.clone(), &sim.ref_maps.maps, kernel)?;
    if let Some((s, _)) = &inputs.scores {
        prov.insert("score_v0".into(), s.v0.into());
    }

    let recons: Vec<Recon> = cfg.methods.par_iter().map(|&m| reconstruct(m, cfg, &inputs)).collect::<Result<_>>()?;

    let mut rows = Vec::new();
    let mut methods = toml::Table::new();
    for r in &recons {
        let windows = export_recon(&dir, cfg, r, Some(&sim.reference), &roi)?;
        if let (true, Some(t)) = (write_traces, &r.trace) {
            fs::write(dir.join(format!("trace-{}.tsv", r.method)), t)?;
        }
        let report = metrics::evaluate(&sim.reference, &r.image, Some(&roi))?;
        rows.push(MetricsRow { method: r.method.name().into(), acceleration: cfg.mask.acceleration, report });
        let mut entry = r.info.clone();
        entry.insert("windows".into(), toml::Value::Table(windows));
        methods.insert(r.method.name().into(), toml::Value::Table(entry));
    }
    fs::write(dir.join(FILE_METRICS), metrics::metrics_tsv(&rows))?;
    prov.insert("methods".into(), toml::Value::Table(methods));
    update_metadata(&dir, cfg, prov)?;
    Ok(RunSummary { rows, recons, calib_residual, output_dir: dir })
}

/// `simulate` stage on its own.
pub fn run_simulate(cfg: &ExperimentConfig) -> Result<Simulation> {
    fs::create_dir_all(&cfg.output_dir)?;
    let sim = simulate(cfg)?;
    let roi = resolve_roi(cfg, &sim.reference)?;
    write_simulation(&cfg.output_dir, &sim)?;
    update_metadata(&cfg.output_dir, cfg, simulation_entries(&sim, &roi)?)?;
    Ok(sim)
}

/// `calibrate` stage: reads the measurement from `input_dir`, writes the
/// kernel to the output directory.
pub fn run_calibrate(cfg: &ExperimentConfig, input_dir: &Path) -> Result<SpiritKernel> {
    fs::create_dir_all(&cfg.output_dir)?;
    let data = read_measurement(input_dir, cfg)?;
    let k = calibrate_kernel(cfg, &data)?;
    cxt::write(cfg.output_dir.join(FILE_KERNEL), k.weights())?;
    update_metadata(&cfg.output_dir, cfg, kernel_entries(&k))?;
    Ok(k)
}

/// `recon` stage for one method from files in `input_dir`.
pub fn run_recon(cfg: &ExperimentConfig, method: Method, input_dir: &Path, write_trace: bool) -> Result<Recon> {
    fs::create_dir_all(&cfg.output_dir)?;
    let data = read_measurement(input_dir, cfg)?;
    let maps = read_maps(&input_dir.join(FILE_MAPS))?;
    let kernel = if method.needs_kernel() { Some(read_kernel(input_dir)?) } else { None };
    let mut single = cfg.clone();
    single.methods = vec![method];
    let ref_maps = if matches!(method, Method::SpiritDiffusion | Method::VeSde) {
        read_maps(&input_dir.join(FILE_REF_MAPS))?
    } else {
        maps.clone()
    };
    let inputs = Inputs::prepare(&single, data, maps, &ref_maps, kernel)?;
    let recon = reconstruct(method, cfg, &inputs)?;
    let reference = cxt::read(input_dir.join(FILE_REFERENCE)).ok().map(|x| metrics::real_image(&x)).transpose()?;
    let roi = match &reference {
        Some(r) => resolve_roi(cfg, r)?,
        None => cfg.roi.unwrap_or_else(|| Roi::full(&recon.image)),
    };
    let windows = export_recon(&cfg.output_dir, cfg, &recon, reference.as_ref(), &roi)?;
    if let (true, Some(t)) = (write_trace, &recon.trace) {
        fs::write(cfg.output_dir.join(format!("trace-{method}.tsv")), t)?;
    }
    let mut entry = recon.info.clone();
    entry.insert("windows".into(), toml::Value::Table(windows));
    let mut methods = toml::Table::new();
    methods.insert(method.name().into(), toml::Value::Table(entry));
    let mut prov = toml::Table::new();
    prov.insert("methods".into(), toml::Value::Table(methods));
    update_metadata(&cfg.output_dir, cfg, prov)?;
    Ok(recon)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(dir: &Path, methods: &[Method]) -> ExperimentConfig {
        let names: Vec<String> = methods.iter().map(|m| format!("\"{m}\"")).collect();
        let src = format!(
            r#"
output_dir = "{}"
methods = [{}]

[phantom]
size = [32, 32]
kind = "shepp-logan"
seed = 1

[coils]
count = 4
seed = 2

[mask]
pattern = "variable-density-random"
acceleration = 3.0
acs = [10, 10]
seed = 3

[classic]
lambda_dc = 1.0
max_iters = 30
tol = 1e-8
step_eta = 0.5
step_lambda = 0.5

[schedule]
beta_min = 0.01
beta_max = 20.0
n_steps = 50

[sampler]
lambda1 = 1.0
lambda2 = 1.0
r = 0.16
n_steps = 50
m_corrector = 0
seed = 4
"#,
            dir.display(),
            names.join(", ")
        );
        ExperimentConfig::from_toml(&src).unwrap()
    }

    #[test]
    fn pipeline_writes_artifacts_and_metadata() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = config(tmp.path(), &Method::ALL);
        let out = run_experiment(&cfg, true).unwrap();
        assert_eq!(out.rows.len(), 5);
        for m in Method::ALL {
            assert!(tmp.path().join(recon_file(m)).exists());
            assert!(tmp.path().join(format!("error-{m}.png")).exists());
            assert!(tmp.path().join(format!("zoom-{m}.png")).exists());
        }
        assert!(tmp.path().join("trace-cg-spirit.tsv").exists());
        let meta = fs::read_to_string(tmp.path().join(FILE_METADATA)).unwrap();
        let back = ExperimentConfig::from_toml(&meta).unwrap();
        let prov = back.provenance.clone().unwrap();
        assert_eq!(prov["calib_residual"].as_float(), out.calib_residual);
        assert!(prov["score_v0"].as_float().unwrap() > 0.0);
        let mut plain = back;
        plain.provenance = None;
        assert_eq!(plain, cfg);
    }

    #[test]
    fn staged_recon_matches_pipeline() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = config(tmp.path(), &[Method::CgSpirit, Method::SpiritDiffusion]);
        let full = run_experiment(&cfg, false).unwrap();
        let other = tempfile::tempdir().unwrap();
        let mut cfg2 = cfg.clone();
        cfg2.output_dir = other.path().to_path_buf();
        for (m, r) in [Method::CgSpirit, Method::SpiritDiffusion].into_iter().zip(&full.recons) {
            let staged = run_recon(&cfg2, m, tmp.path(), false).unwrap();
            assert_eq!(staged.image, r.image, "{m}");
        }
    }

    #[test]
    fn missing_kernel_is_reported() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = config(tmp.path(), &[Method::ZeroFilled]);
        run_simulate(&cfg).unwrap();
        let err = run_recon(&cfg, Method::CgSpirit, tmp.path(), false).unwrap_err();
        assert!(matches!(err, Error::Io(_)));
        run_calibrate(&cfg, tmp.path()).unwrap();
        assert!(run_recon(&cfg, Method::CgSpirit, tmp.path(), false).is_ok());
    }
}
