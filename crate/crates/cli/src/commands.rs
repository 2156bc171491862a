use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use capsbeam_core::accel::{
    conv_layer_report, estimate_latency, network_layers, network_report, routing_layer_report, sim_conv_layer,
    sim_network, ConvSimOptions, SimReport, WeightPolicy,
};
use capsbeam_core::beamform::{
    compound, das, envelope, hann_apodization, log_compress, mvdr, to_pgm, uniform_apodization, BeamformedImage,
};
use capsbeam_core::capsnet::{
    activation_name, count_flops, count_params, infer, random_bundle, LayerKind, INPUT_ACTIVATION,
};
use capsbeam_core::io::{read_bundle_file, read_tensor_file};
use capsbeam_core::metrics::{cnr, contrast_ratio, gcnr, point_resolution, RegionRole, DEFAULT_GCNR_BINS};
use capsbeam_core::phantom::{simulate_rx, tof_correct, RawChannelData, SimOptions};
use capsbeam_core::pruning::{apply_mask, expand_compacted, plan_prune, prune_report, ConvNetDescription, PruneMethod};
use capsbeam_core::quant::{calibrate, pre_activation_name, QStage, QuantPlan, QuantizedNet, ReluBiasOrder};
use capsbeam_core::{EnvelopeImage, RfVolume, Tensor, WeightBundle};

use crate::artifacts::{sha256_hex, OutDir};
use crate::config::{PipelineConfig, QuantMode, Region};
use crate::{compare, Command, Common, Method, Mode, OrderArg, PolicyArg, PruneMethodArg};

/// A usage mistake found after argument parsing; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

struct Ctx {
    cfg: PipelineConfig,
    out: OutDir,
    seed: u64,
}

fn setup(common: &Common, command: &str) -> Result<Ctx> {
    let (mut cfg, hash) = match &common.config {
        Some(p) => {
            let bytes = std::fs::read(p).with_context(|| format!("reading config {}", p.display()))?;
            (PipelineConfig::load(p)?, sha256_hex(&bytes))
        }
        None => (PipelineConfig::default(), "none".to_string()),
    };
    if let Some(s) = common.seed {
        cfg.phantom.rng_seed = s;
    }
    let out = OutDir::create(&common.out, command, &hash)?;
    Ok(Ctx { seed: cfg.phantom.rng_seed, cfg, out })
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "input".into())
}

/// `base.ext` for a single item, `base_<k>.ext` otherwise.
fn indexed(base: &str, ext: &str, k: usize, n: usize) -> String {
    if n == 1 {
        format!("{base}.{ext}")
    } else {
        format!("{base}_{k}.{ext}")
    }
}

fn read_tensor(p: &Path) -> Result<Tensor> {
    read_tensor_file(p).with_context(|| format!("reading {}", p.display()))
}

fn load_rf(cfg: &PipelineConfig, p: &Path) -> Result<RfVolume> {
    let t = read_tensor(p)?;
    let &[rows, cols, ch] = t.dims() else {
        bail!("{}: expected [rows, cols, channels], got {:?}", p.display(), t.dims());
    };
    if (rows, cols) != (cfg.grid.num_rows, cfg.grid.num_cols) {
        bail!("{}: {rows}x{cols} pixels, config grid is {}x{}", p.display(), cfg.grid.num_rows, cfg.grid.num_cols);
    }
    Ok(RfVolume::new(cfg.grid.clone(), ch, t)?)
}

fn load_env(cfg: &PipelineConfig, p: &Path) -> Result<EnvelopeImage> {
    EnvelopeImage::from_tensor(cfg.grid.clone(), &read_tensor(p)?)
        .with_context(|| format!("reading envelope {}", p.display()))
}

fn load_weights(ctx: &Ctx, weights: &Option<PathBuf>) -> Result<WeightBundle> {
    match weights {
        Some(p) => read_bundle_file(p).with_context(|| format!("reading {}", p.display())),
        None => {
            eprintln!("note: no --weights, using random weights from seed {}", ctx.seed);
            Ok(random_bundle(&ctx.cfg.capsnet, ctx.seed)?)
        }
    }
}

fn write_image(ctx: &Ctx, name: &str, env: &EnvelopeImage) -> Result<()> {
    ctx.out.tensor(&format!("{name}.cbtf"), &env.to_tensor())?;
    let db = log_compress(env, ctx.cfg.dynamic_range_db)?;
    ctx.out.write(&format!("{name}.pgm"), &to_pgm(&db, ctx.cfg.dynamic_range_db)?)?;
    println!("wrote {name}.cbtf, {name}.pgm");
    Ok(())
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth { common } => synth(&setup(&common, "synth")?),
        Command::Tofc { common, inputs } => tofc(&setup(&common, "tofc")?, &inputs),
        Command::Beamform { common, method, inputs } => beamform(&setup(&common, "beamform")?, method, &inputs),
        Command::Infer { common, weights, input, mode } => infer_cmd(&setup(&common, "infer")?, &weights, &input, mode),
        Command::Prune { common, method, r, ratio, weights, ratios, input, max_cr_loss_db, max_fwhm_growth_pct } => {
            let ctx = setup(&common, "prune")?;
            let mut s = ctx.cfg.prune.clone();
            if let Some(m) = method {
                s.method = match m {
                    PruneMethodArg::Magnitude => PruneMethod::Magnitude,
                    PruneMethodArg::Lakp => PruneMethod::Lakp,
                    PruneMethodArg::LakpMl => PruneMethod::LakpMl,
                };
            }
            s.r = r.unwrap_or(s.r);
            s.ratio = ratio.unwrap_or(s.ratio);
            if !(0.0..1.0).contains(&s.ratio) || s.r == 0 {
                return Err(usage(format!(
                    "--ratio must be in [0, 1) and --r at least 1 (got {} and {})",
                    s.ratio, s.r
                )));
            }
            let gates = Gates { max_cr_loss_db, max_fwhm_growth_pct };
            match input {
                Some(input) => sweep(&ctx, &s, &weights, &ratios, &input, &gates),
                None => prune(&ctx, &s, &weights),
            }
        }
        Command::Quantize { common, weights, inputs } => quantize(&setup(&common, "quantize")?, &weights, &inputs),
        Command::Sim { common, layer, policy, order, weights, input, check } => {
            let ctx = setup(&common, "sim")?;
            let policy = match policy {
                Some(PolicyArg::ReloadPerBlock) => WeightPolicy::ReloadPerBlock,
                Some(PolicyArg::WeightsResident) => WeightPolicy::WeightsResident,
                None => ctx.cfg.policy,
            };
            let order = match order {
                Some(OrderArg::BiasThenRelu) => ReluBiasOrder::BiasThenRelu,
                Some(OrderArg::ReluThenBias) => ReluBiasOrder::ReluThenBias,
                None => ctx.cfg.order,
            };
            match (weights, input) {
                (Some(w), Some(i)) => sim_functional(&ctx, layer.as_deref(), policy, order, &w, &i, check),
                _ => sim_analytic(&ctx, layer.as_deref(), policy),
            }
        }
        Command::Metrics { common, inputs } => metrics(&setup(&common, "metrics")?, &inputs),
        Command::Compare { run_a, run_b, out } => compare::run(&run_a, &run_b, &out),
        Command::Report { common } => report(&setup(&common, "report")?),
    }
}

fn synth(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let n = cfg.transmit_angles_rad.len();
    let samples = cfg.time_samples();
    for (k, &angle) in cfg.transmit_angles_rad.iter().enumerate() {
        let opts =
            SimOptions { pulse: cfg.pulse, noise_std: cfg.noise_std, noise_seed: ctx.seed.wrapping_add(1 + k as u64) };
        let raw = simulate_rx(&cfg.phantom, &cfg.probe_at(angle), samples, &opts)?;
        let name = indexed("raw", "cbtf", k, n);
        ctx.out.tensor(&name, &raw.samples)?;
        println!("wrote {name}: {} samples x {} elements at {angle} rad", samples, cfg.probe.num_elements);
    }
    Ok(())
}

fn tofc(ctx: &Ctx, inputs: &[PathBuf]) -> Result<()> {
    let angles = &ctx.cfg.transmit_angles_rad;
    if inputs.len() != angles.len() {
        return Err(usage(format!(
            "tofc got {} --in files for {} configured transmit angles; pass one raw file per angle, in angle order",
            inputs.len(),
            angles.len()
        )));
    }
    for (k, (p, &angle)) in inputs.iter().zip(angles).enumerate() {
        let raw = RawChannelData::new(ctx.cfg.probe_at(angle), read_tensor(p)?)
            .with_context(|| format!("{} against the [probe] config", p.display()))?;
        let rf = tof_correct(&raw, &ctx.cfg.grid)?;
        let name = indexed("rf", "cbtf", k, inputs.len());
        ctx.out.tensor(&name, &rf.samples)?;
        println!("wrote {name}: {}x{}x{}", ctx.cfg.grid.num_rows, ctx.cfg.grid.num_cols, rf.num_channels);
    }
    Ok(())
}

fn beamform(ctx: &Ctx, method: Method, inputs: &[PathBuf]) -> Result<()> {
    let mut images = Vec::new();
    for p in inputs {
        let rf = load_rf(&ctx.cfg, p)?;
        images.push(match method {
            Method::Das => das(&rf, &uniform_apodization(rf.num_channels))?,
            Method::DasHann => das(&rf, &hann_apodization(rf.num_channels))?,
            Method::Mvdr => mvdr(&rf, &ctx.cfg.mvdr)?,
        });
    }
    let img: BeamformedImage = if images.len() == 1 { images.remove(0) } else { compound(&images)? };
    let name = match method {
        Method::Das => "das",
        Method::DasHann => "das_hann",
        Method::Mvdr => "mvdr",
    };
    ctx.out.tensor(&format!("{name}_beamsum.cbtf"), &img.values)?;
    write_image(ctx, name, &envelope(&img)?)
}

fn plan_of(bundle: &WeightBundle) -> Option<QuantPlan> {
    (bundle.meta("quantization") == Some("fixed16")).then(|| QuantPlan::from_bundle(bundle).ok()).flatten()
}

fn infer_cmd(ctx: &Ctx, weights: &Option<PathBuf>, input: &Path, mode: Option<Mode>) -> Result<()> {
    let cfg = &ctx.cfg;
    let bundle = load_weights(ctx, weights)?;
    let rf = load_rf(cfg, input)?;
    let mode = match mode {
        Some(Mode::Float) => QuantMode::Float,
        Some(Mode::Fixed) => QuantMode::Fixed,
        None => cfg.quant_mode,
    };
    match mode {
        QuantMode::Float => write_image(ctx, "capsbeam_float", &infer(&rf, &cfg.capsnet, &expand_compacted(&bundle)?)?),
        QuantMode::Fixed => {
            let plan = match plan_of(&bundle) {
                Some(p) => p,
                None => {
                    eprintln!("note: bundle has no fixed-point scales, calibrating on the input");
                    calibrate(&bundle, std::slice::from_ref(&rf), &cfg.capsnet)?
                }
            };
            let net = QuantizedNet::build(&cfg.capsnet, &bundle, &plan)?;
            write_image(ctx, "capsbeam_fixed", &net.forward_observed(&rf, &mut |_, _| {})?)
        }
    }
}

fn prune_net(ctx: &Ctx, weights: &Option<PathBuf>) -> Result<(WeightBundle, ConvNetDescription)> {
    let dense = expand_compacted(&load_weights(ctx, weights)?)?;
    let net = ConvNetDescription::conv_stack(&ctx.cfg.capsnet, &dense)?;
    Ok((dense, net))
}

fn prune(ctx: &Ctx, s: &crate::config::PruneSettings, weights: &Option<PathBuf>) -> Result<()> {
    let (dense, net) = prune_net(ctx, weights)?;
    let mask = plan_prune(&net, s.ratio, s.method, s.r)?;
    let rep = prune_report(&net, &mask, s.ratio, &ctx.cfg.grid)?;
    ctx.out.bundle("pruned.cbwb", &apply_mask(&dense, &mask)?)?;
    let rows: Vec<Vec<String>> = rep.rows().into_iter().map(|(k, v)| vec![k, v]).collect();
    ctx.out.csv("prune_report.csv", &["field", "value"], &rows)?;
    for r in &rows {
        println!("{}={}", r[0], r[1]);
    }
    Ok(())
}

struct Gates {
    max_cr_loss_db: Option<f64>,
    max_fwhm_growth_pct: Option<f64>,
}

/// Contrast ratios of every target/background pair and lateral FWHM of
/// every point target.
fn gate_metrics(cfg: &PipelineConfig, env: &EnvelopeImage) -> Result<(Vec<f64>, Vec<f64>)> {
    let areas = cfg.areas();
    let mut cr = Vec::new();
    for t in areas.iter().filter(|a| a.role == RegionRole::TargetIn) {
        for b in areas.iter().filter(|a| a.role == RegionRole::BackgroundOut) {
            cr.push(contrast_ratio(env, t, b)?);
        }
    }
    let mut fwhm = Vec::new();
    for r in &cfg.regions {
        if let Region::Point { x_m, z_m, window_m, .. } = r {
            fwhm.push(point_resolution(env, *x_m, *z_m, *window_m)?.lateral_fwhm_mm);
        }
    }
    Ok((cr, fwhm))
}

/// Prunes at increasing ratios and keeps the last one whose float image
/// stays within the gates relative to the unpruned image.
fn sweep(
    ctx: &Ctx,
    s: &crate::config::PruneSettings,
    weights: &Option<PathBuf>,
    ratios: &[f64],
    input: &Path,
    gates: &Gates,
) -> Result<()> {
    if ratios.is_empty() {
        return Err(usage("a prune sweep needs --ratios r1,r2,... together with --in"));
    }
    if gates.max_cr_loss_db.is_none() && gates.max_fwhm_growth_pct.is_none() {
        return Err(usage("a prune sweep needs --max-cr-loss-db and/or --max-fwhm-growth-pct"));
    }
    let mut ratios = ratios.to_vec();
    if ratios.iter().any(|r| !(0.0..1.0).contains(r)) {
        return Err(usage("--ratios values must be in [0, 1)"));
    }
    ratios.sort_by(f64::total_cmp);
    let cfg = &ctx.cfg;
    let (dense, net) = prune_net(ctx, weights)?;
    let rf = load_rf(cfg, input)?;
    let (cr0, fw0) = gate_metrics(cfg, &infer(&rf, &cfg.capsnet, &dense)?)?;
    if cr0.is_empty() && fw0.is_empty() {
        bail!("a prune sweep needs [regions]: target/background pairs or point targets");
    }
    let mut rows = Vec::new();
    let mut chosen = None;
    for &ratio in &ratios {
        let mask = plan_prune(&net, ratio, s.method, s.r)?;
        let rep = prune_report(&net, &mask, ratio, &cfg.grid)?;
        let pruned = apply_mask(&dense, &mask)?;
        let (cr, fw) = gate_metrics(cfg, &infer(&rf, &cfg.capsnet, &expand_compacted(&pruned)?)?)?;
        let cr_ok = gates.max_cr_loss_db.is_none_or(|g| cr.iter().zip(&cr0).all(|(a, b)| b - a <= g));
        let fw_ok =
            gates.max_fwhm_growth_pct.is_none_or(|g| fw.iter().zip(&fw0).all(|(a, b)| a <= &(b * (1.0 + g / 100.0))));
        let pass = cr_ok && fw_ok;
        let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";");
        rows.push(vec![
            ratio.to_string(),
            rep.ratio_achieved.to_string(),
            rep.kept_param_fraction().to_string(),
            join(&cr),
            join(&fw),
            pass.to_string(),
        ]);
        println!("ratio={ratio} achieved={:.4} pass={pass}", rep.ratio_achieved);
        if !pass {
            break;
        }
        chosen = Some((ratio, pruned, rep));
    }
    ctx.out.csv(
        "prune_sweep.csv",
        &["ratio", "ratio_achieved", "kept_param_fraction", "cr_db", "lateral_fwhm_mm", "pass"],
        &rows,
    )?;
    let Some((ratio, pruned, rep)) = chosen else {
        bail!("no swept ratio passes the gates (smallest was {})", ratios[0]);
    };
    ctx.out.bundle("pruned.cbwb", &pruned)?;
    let rows: Vec<Vec<String>> = rep.rows().into_iter().map(|(k, v)| vec![k, v]).collect();
    ctx.out.csv("prune_report.csv", &["field", "value"], &rows)?;
    println!("chosen ratio={ratio}");
    Ok(())
}

fn quantize(ctx: &Ctx, weights: &Option<PathBuf>, inputs: &[PathBuf]) -> Result<()> {
    let mut bundle = load_weights(ctx, weights)?;
    let samples: Vec<RfVolume> = inputs.iter().map(|p| load_rf(&ctx.cfg, p)).collect::<Result<_>>()?;
    let plan = calibrate(&bundle, &samples, &ctx.cfg.capsnet)?;
    plan.write_to(&mut bundle)?;
    ctx.out.bundle("quantized.cbwb", &bundle)?;
    let rows: Vec<Vec<String>> = plan.scales.iter().map(|(k, f)| vec![k.clone(), f.to_string()]).collect();
    ctx.out.csv("scales.csv", &["tensor", "scale_exp"], &rows)?;
    println!("wrote quantized.cbwb with {} scales", rows.len());
    Ok(())
}

fn layer_names(ctx: &Ctx) -> String {
    ctx.cfg.capsnet.layers().iter().map(|l| l.name.clone()).collect::<Vec<_>>().join(", ")
}

fn emit_report(ctx: &Ctx, rep: &SimReport) -> Result<()> {
    let text = rep.to_text(&ctx.cfg.accel);
    print!("{text}");
    ctx.out.write("sim_report.txt", text.as_bytes())?;
    let mut rows: Vec<Vec<String>> =
        rep.summary().into_iter().map(|(k, v)| vec!["total".into(), k.into(), v]).collect();
    for l in &rep.layers {
        for (k, v) in [
            ("external_word_transactions", l.external_word_transactions),
            ("weight_words", l.weight_words),
            ("input_words", l.input_words),
            ("output_words", l.output_words),
            ("compute_cycles", l.compute_cycles),
            ("stall_cycles", l.stall_cycles),
            ("bram_bytes", l.bram_bytes),
            ("ops", l.ops),
        ] {
            rows.push(vec![l.name.clone(), k.into(), v.to_string()]);
        }
    }
    ctx.out.csv("sim_report.csv", &["layer", "field", "value"], &rows)?;
    Ok(())
}

fn sim_analytic(ctx: &Ctx, layer: Option<&str>, policy: WeightPolicy) -> Result<()> {
    let cfg = &ctx.cfg;
    let rep = match layer {
        None => network_report(&cfg.capsnet, &cfg.grid, &cfg.accel, policy, &BTreeMap::new())?,
        Some(name) => {
            let kind = cfg.capsnet.layers().into_iter().find(|l| l.name == name).map(|l| l.kind);
            let l = match kind {
                Some(LayerKind::Routing(r)) => routing_layer_report(name, &r, cfg.grid.num_pixels(), &cfg.accel)?,
                Some(_) => {
                    let (desc, _) = network_layers(&cfg.capsnet, &cfg.grid)?
                        .into_iter()
                        .find(|(d, _)| d.name == name)
                        .expect("every non-routing layer has a description");
                    conv_layer_report(&desc, &cfg.accel, policy)?
                }
                None => {
                    return Err(usage(format!("--layer `{name}` is not in the network; layers: {}", layer_names(ctx))))
                }
            };
            SimReport::from_layers(vec![l], &cfg.accel, policy)
        }
    };
    emit_report(ctx, &rep)
}

fn sim_functional(
    ctx: &Ctx,
    layer: Option<&str>,
    policy: WeightPolicy,
    order: ReluBiasOrder,
    weights: &Path,
    input: &Path,
    check: bool,
) -> Result<()> {
    let cfg = &ctx.cfg;
    let bundle = read_bundle_file(weights).with_context(|| format!("reading {}", weights.display()))?;
    let Some(plan) = plan_of(&bundle) else {
        bail!("{} has no fixed-point scales; run `capsbeam quantize` first", weights.display());
    };
    let net = QuantizedNet::build(&cfg.capsnet, &bundle, &plan)?;
    let rf = load_rf(cfg, input)?;
    let Some(name) = layer else {
        let (env, rep) = sim_network(&net, &rf, &cfg.accel, policy, order)?;
        write_image(ctx, "sim_out", &env)?;
        if check && env != net.forward_observed(&rf, &mut |_, _| {})? {
            bail!("simulated network output differs from fixed-point inference");
        }
        return emit_report(ctx, &rep);
    };
    let Some(pos) = net.stages.iter().position(|(n, _)| n == name) else {
        return Err(usage(format!("--layer `{name}` is not in the network; layers: {}", layer_names(ctx))));
    };
    // Activations entering and leaving the layer on the quantized path.
    let in_name = if pos == 0 { INPUT_ACTIVATION.to_string() } else { activation_name(&net.stages[pos - 1].0) };
    let out_name = match &net.stages[pos].1 {
        QStage::CapsConv { .. } => pre_activation_name(name),
        _ => activation_name(name),
    };
    let mut acts: BTreeMap<String, Vec<i16>> = BTreeMap::new();
    net.forward_observed(&rf, &mut |n, v| {
        if n == in_name || n == out_name {
            acts.insert(n.to_string(), v.to_vec());
        }
    })?;
    let (rows, cols) = (cfg.grid.num_rows, cfg.grid.num_cols);
    let x = &acts[&in_name];
    let (out, rep, f, width) = match &net.stages[pos].1 {
        QStage::Conv(c) | QStage::Fc(c) | QStage::CapsConv { conv: c, .. } => {
            let (o, r) = sim_conv_layer(x, rows, cols, c, &cfg.accel, &ConvSimOptions { policy, order, rows: None })?;
            (o, r, c.f_out, c.cout)
        }
        QStage::Routing { spec, f_u, f_v } => {
            let (o, r) = capsbeam_core::accel::sim_routing(x, rows * cols, spec, *f_u, *f_v, &cfg.accel)?;
            (o, r, *f_v, spec.num_out_capsules * spec.out_dim)
        }
    };
    let t = Tensor::from_i16(vec![rows, cols, width], f as i8, out.clone())?;
    ctx.out.tensor(&format!("sim_{name}.cbtf"), &t)?;
    if check && out != acts[&out_name] {
        bail!("simulated `{name}` differs from fixed-point inference");
    }
    emit_report(ctx, &rep)
}

fn metric_rows(cfg: &PipelineConfig, image: &str, env: &EnvelopeImage) -> Result<Vec<Vec<String>>> {
    let areas = cfg.areas();
    let mut rows = Vec::new();
    let mut push = |metric: &str, v: f64, unit: &str, regions: String| {
        rows.push(vec![image.to_string(), metric.to_string(), v.to_string(), unit.to_string(), regions]);
    };
    for t in areas.iter().filter(|a| a.role == RegionRole::TargetIn) {
        for b in areas.iter().filter(|a| a.role == RegionRole::BackgroundOut) {
            let ids = format!("{}|{}", t.name, b.name);
            push("cr", contrast_ratio(env, t, b)?, "dB", ids.clone());
            push("cnr", cnr(env, t, b)?, "", ids.clone());
            push("gcnr", gcnr(env, t, b, DEFAULT_GCNR_BINS)?, "", ids);
        }
    }
    for r in &cfg.regions {
        if let Region::Point { name, x_m, z_m, window_m } = r {
            // A profile without half-maximum crossings has no width to report.
            match point_resolution(env, *x_m, *z_m, *window_m) {
                Ok(res) => {
                    push("axial_fwhm", res.axial_fwhm_mm, "mm", name.clone());
                    push("lateral_fwhm", res.lateral_fwhm_mm, "mm", name.clone());
                }
                Err(e) => eprintln!("warning: {image}: no resolution for `{name}`: {e}"),
            }
        }
    }
    Ok(rows)
}

fn metrics(ctx: &Ctx, inputs: &[PathBuf]) -> Result<()> {
    if ctx.cfg.regions.is_empty() {
        bail!("no [regions] configured");
    }
    let mut rows = Vec::new();
    for p in inputs {
        rows.extend(metric_rows(&ctx.cfg, &stem(p), &load_env(&ctx.cfg, p)?)?);
    }
    ctx.out.csv("metrics.csv", &compare::METRIC_HEADER, &rows)?;
    for r in &rows {
        println!("{}", r.join(","));
    }
    Ok(())
}

fn report(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let params = count_params(&cfg.capsnet)?;
    let flops = count_flops(&cfg.capsnet, &cfg.grid)?;
    let base = estimate_latency(&cfg.capsnet, &cfg.grid, &cfg.accel, false)?;
    let opt = estimate_latency(&cfg.capsnet, &cfg.grid, &cfg.accel, true)?;
    let speedup = if opt.modeled_latency_s > 0.0 { base.modeled_latency_s / opt.modeled_latency_s } else { 0.0 };
    let rows: Vec<Vec<String>> = [
        ("params", params.to_string()),
        ("flops_per_frame", flops.to_string()),
        ("baseline_policy", base.policy.to_string()),
        ("baseline_latency_s", format!("{:.9}", base.modeled_latency_s)),
        ("baseline_transactions", base.external_word_transactions.to_string()),
        ("baseline_gops", format!("{:.6}", base.modeled_gops)),
        ("optimized_policy", opt.policy.to_string()),
        ("optimized_latency_s", format!("{:.9}", opt.modeled_latency_s)),
        ("optimized_transactions", opt.external_word_transactions.to_string()),
        ("optimized_gops", format!("{:.6}", opt.modeled_gops)),
        ("latency_ratio", format!("{speedup:.6}")),
    ]
    .into_iter()
    .map(|(k, v)| vec![k.to_string(), v])
    .collect();
    ctx.out.csv("report.csv", &["quantity", "value"], &rows)?;
    let text: String = rows.iter().map(|r| format!("{}={}\n", r[0], r[1])).collect();
    ctx.out.write("report.txt", text.as_bytes())?;
    print!("{text}");
    Ok(())
}
