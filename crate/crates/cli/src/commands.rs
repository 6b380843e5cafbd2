use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde_json::json;
use spnn::checkpoint::Checkpoint;
use spnn::config::{load_spec, ExperimentConfig};
use spnn::data::{attribute_stats, generate_split, Dataset, Split};
use spnn::diffusion::{sample_guided, train_denoiser, Denoiser, DiffusionSchedule, Guidance, SampleResult, TargetRule};
use spnn::linalg::{max_abs_diff, penrose_residuals, pinv as matrix_pinv, DenseMatrix};
use spnn::losses::{r_distance, train_phase1, train_phase2};
use spnn::metrics::MetricsWriter;
use spnn::nn::Rng;
use spnn::par::{self, Exec};
use spnn::spnn::SpnnModel;
use spnn::verify::{attribute_agreement, forward_fingerprint, run_ablation_grid, run_penrose_suite, run_projection_suite, GuidedRunConfig};

use crate::error::CliError;
use crate::{
    ConfigArg, EditArgs, GenDataArgs, GuidanceArgs, InitModelArgs, PinvArgs, RestoreArgs, SplitArg, Suite, TrainDiffusionArgs,
    TrainForwardArgs, TrainPinvArgs, VerifyArgs,
};

fn load_config(c: &ConfigArg) -> Result<ExperimentConfig, CliError> {
    match &c.config {
        Some(p) => Ok(ExperimentConfig::load(p)?),
        None => Ok(ExperimentConfig::default()),
    }
}

fn echo(cfg: &ExperimentConfig) -> serde_json::Value {
    serde_json::to_value(cfg).expect("config serializes")
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn create(path: &Path) -> Result<MetricsWriter<BufWriter<File>>, CliError> {
    Ok(MetricsWriter::new(BufWriter::new(File::create(path)?)))
}

fn append_metrics<T: serde::Serialize>(path: Option<&Path>, records: &[T]) -> Result<(), CliError> {
    if let Some(p) = path {
        let mut w = MetricsWriter::append(p)?;
        w.write_all(records)?;
        w.flush()?;
    }
    Ok(())
}

fn load_data(path: &Path) -> Result<Dataset, CliError> {
    Ok(Dataset::load(path)?)
}

fn check_data_fits(m: &SpnnModel, data: &Dataset) -> Result<(), CliError> {
    if data.sample_dim() != m.input_dim() || data.n_attributes() != m.output_dim() {
        return Err(CliError::Usage(format!(
            "dataset is {}→{} but the model is {}→{}",
            data.sample_dim(),
            data.n_attributes(),
            m.input_dim(),
            m.output_dim()
        )));
    }
    Ok(())
}

fn check_spec(cfg: &ExperimentConfig, data: &Dataset) -> Result<(), CliError> {
    if data.spec_hash != cfg.data.spec.hash() {
        return Err(CliError::Usage("dataset was generated from a different data spec than the config".into()));
    }
    Ok(())
}

pub fn gen_data(a: GenDataArgs) -> Result<(), CliError> {
    let cfg = load_config(&a.config)?;
    let spec = match &a.spec {
        Some(p) => load_spec(p)?,
        None => cfg.data.spec.clone(),
    };
    let (split, n, seed) = match a.split {
        SplitArg::Train => (Split::Train, cfg.data.n_train, cfg.data.seed),
        SplitArg::Test => (Split::Test, cfg.data.n_test, cfg.data.seed + 1),
    };
    let n = a.n.map_or(n, |v| v as usize);
    let seed = a.seed.unwrap_or(seed);
    let ds = generate_split(&spec, n, seed, split)?;
    ds.save(&a.out)?;
    println!("{}", json!({"samples": ds.len(), "seed": seed, "spec_hash": hex(&ds.spec_hash)}));
    Ok(())
}

pub fn init_model(a: InitModelArgs) -> Result<(), CliError> {
    let cfg = load_config(&a.config)?;
    let seed = a.seed.unwrap_or(cfg.model.init_seed);
    let m = SpnnModel::new(&cfg.topology(), &mut Rng::new(seed))?;
    Checkpoint::from_model(&m, None, echo(&cfg), seed).save(&a.out)?;
    println!("{}", json!({"input_dim": m.input_dim(), "output_dim": m.output_dim(), "null_dim": m.null_dim()}));
    Ok(())
}

pub fn train_forward(a: TrainForwardArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&a.config)?;
    let t = &mut cfg.train;
    t.phase1_epochs = a.epochs.unwrap_or(t.phase1_epochs);
    t.lr = a.lr.unwrap_or(t.lr);
    t.lr_r = a.lr_r.unwrap_or(t.lr_r);
    t.batch_size = a.batch_size.unwrap_or(t.batch_size);
    t.seed = a.seed.unwrap_or(t.seed);
    cfg.validate()?;

    let data = load_data(&a.data)?;
    let eval = a.eval.as_deref().map(load_data).transpose()?;
    let (mut m, resume, seed) = match &a.resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            let m = ck.model()?;
            if m.is_forward_frozen() {
                return Err(CliError::Usage("cannot resume phase I from a checkpoint with frozen forward parameters".into()));
            }
            let state = ck
                .optim_state()?
                .ok_or_else(|| CliError::Usage("checkpoint holds no optimizer state to resume from".into()))?;
            (m, Some(state), ck.manifest.seed)
        }
        None => (SpnnModel::new(&cfg.topology(), &mut Rng::new(cfg.model.init_seed))?, None, cfg.model.init_seed),
    };
    check_data_fits(&m, &data)?;

    let out = train_phase1(&mut m, &data, eval.as_ref(), &cfg.train, resume)?;
    append_metrics(a.metrics.as_deref(), &out.metrics)?;
    Checkpoint::from_model(&m, Some(&out.state), echo(&cfg), seed).save(&a.out)?;
    let last = out.metrics.last();
    println!(
        "{}",
        json!({
            "epochs_done": out.state.epochs_done,
            "loss_task": last.and_then(|r| r.loss_task),
            "accuracy": last.and_then(|r| r.accuracy),
        })
    );
    Ok(())
}

pub fn train_pinv(a: TrainPinvArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&a.config)?;
    let t = &mut cfg.train;
    t.phase2_epochs = a.epochs.unwrap_or(t.phase2_epochs);
    t.phase2_lr_r = a.lr_r.unwrap_or(t.phase2_lr_r);
    t.phase2_batch_size = a.batch_size.unwrap_or(t.phase2_batch_size);
    t.weights.natural = a.w_natural.unwrap_or(t.weights.natural);
    t.weights.r_surj = a.w_r_surj.unwrap_or(t.weights.r_surj);
    t.weights.r_stab = a.w_r_stab.unwrap_or(t.weights.r_stab);
    t.seed = a.seed.unwrap_or(t.seed);
    cfg.validate()?;

    let ck = Checkpoint::load(&a.model)?;
    let mut m = ck.model()?;
    let data = load_data(&a.data)?;
    check_data_fits(&m, &data)?;
    m.freeze_forward();
    let before = forward_fingerprint(&m);

    let ys = m.forward_batch(&data.samples, Exec::Parallel)?;
    let d0 = r_distance(&m, &ys)?;
    let xs = (cfg.train.weights.r_stab > 0.0).then_some(data.samples.as_slice());
    let out = train_phase2(&mut m, &ys, xs, &cfg.train, None)?;
    let d1 = r_distance(&m, &ys)?;
    if forward_fingerprint(&m) != before {
        return Err(CliError::Verification("forward parameters changed during phase II".into()));
    }
    append_metrics(a.metrics.as_deref(), &out.metrics)?;
    Checkpoint::from_model(&m, Some(&out.state), echo(&cfg), ck.manifest.seed).save(&a.out)?;
    println!(
        "{}",
        json!({
            "epochs_done": out.state.epochs_done,
            "r_distance_before": d0,
            "r_distance_after": d1,
            "forward_fingerprint": hex(&before),
        })
    );
    Ok(())
}

pub fn train_diffusion(a: TrainDiffusionArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&a.config)?;
    let t = &mut cfg.diffusion.train;
    t.epochs = a.epochs.unwrap_or(t.epochs);
    t.lr = a.lr.unwrap_or(t.lr);
    t.seed = a.seed.unwrap_or(t.seed);
    cfg.validate()?;

    let data = load_data(&a.data)?;
    let eval = a.eval.as_deref().map(load_data).transpose()?;
    let sched = cfg.diffusion.schedule()?;
    let d = &cfg.diffusion;
    let mut den = Denoiser::with_shape(data.sample_dim(), d.width, d.depth, d.emb_dim, &mut Rng::new(d.init_seed));
    let metrics = train_denoiser(&mut den, &data.samples, eval.as_ref().map(|e| e.samples.as_slice()), &sched, &d.train)?;
    append_metrics(a.metrics.as_deref(), &metrics)?;
    Checkpoint::from_denoiser(&den, echo(&cfg), d.init_seed).save(&a.out)?;
    let last = metrics.last();
    println!(
        "{}",
        json!({"epochs": metrics.len(), "loss": last.map(|r| r.loss), "val_loss": last.and_then(|r| r.val_loss)})
    );
    Ok(())
}

struct Guided {
    cfg: ExperimentConfig,
    model: SpnnModel,
    den: Denoiser,
    sched: DiffusionSchedule,
    run: GuidedRunConfig,
}

fn guided_setup(g: &GuidanceArgs, edit: bool) -> Result<Guided, CliError> {
    let cfg = load_config(&g.config)?;
    let mut run = if edit { cfg.edit_run() } else { cfg.restore_run() };
    if let Some(m) = g.mode {
        run.nlbp.pinv_mode = m.into();
    }
    if let Some(u) = g.update {
        run.nlbp.update = u.into();
    }
    run.nlbp.lambda = g.lambda.unwrap_or(run.nlbp.lambda);
    run.nlbp.guidance_start_t = g.guidance_start.unwrap_or(run.nlbp.guidance_start_t);
    run.sampler.travel_length = g.travel_length.unwrap_or(run.sampler.travel_length);
    run.sampler.travel_repeat = g.travel_repeat.unwrap_or(run.sampler.travel_repeat);
    run.seed = g.seed;
    run.runs = g.runs;
    run.nlbp.validate()?;
    if run.runs == 0 {
        return Err(CliError::Usage("--runs must be >= 1".into()));
    }

    let model = Checkpoint::load(&g.model)?.model()?;
    let dck = Checkpoint::load(&g.denoiser)?;
    let den = dck.denoiser()?;
    if model.input_dim() != den.data_dim {
        return Err(CliError::Usage(format!(
            "incompatible dims: model input {} but denoiser data {}",
            model.input_dim(),
            den.data_dim
        )));
    }
    let sched = cfg.diffusion.schedule()?;
    if let Ok(trained) = serde_json::from_value::<ExperimentConfig>(dck.manifest.config.clone()) {
        if trained.diffusion.schedule()? != sched {
            return Err(CliError::Usage("denoiser was trained with a different noise schedule than the config".into()));
        }
    }
    Ok(Guided {
        cfg,
        model,
        den,
        sched,
        run,
    })
}

fn write_trajectories(path: Option<&Path>, results: &[(usize, &SampleResult)]) -> Result<(), CliError> {
    let Some(p) = path else { return Ok(()) };
    let mut w = MetricsWriter::append(p)?;
    for (run, r) in results {
        for s in &r.records {
            let mut v = serde_json::to_value(s).expect("plain record");
            v["run"] = json!(run);
            w.write(&v)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn restore(a: RestoreArgs) -> Result<(), CliError> {
    let g = guided_setup(&a.guidance, false)?;
    let data = load_data(&a.data)?;
    check_data_fits(&g.model, &data)?;
    check_spec(&g.cfg, &data)?;
    if a.target + g.run.runs > data.len() {
        return Err(CliError::Usage(format!(
            "targets {}..{} exceed the {} samples in the dataset",
            a.target,
            a.target + g.run.runs,
            data.len()
        )));
    }
    let (mm, mode) = g.run.nlbp.pinv_mode.resolve(&g.model, g.run.seed ^ 0xabcd);
    let rows = par::map_range(Exec::Parallel, g.run.runs, |i| -> Result<_, CliError> {
        let idx = a.target + i;
        let y = mm.forward(&data.samples[idx])?;
        let guide = Guidance {
            model: &mm,
            mode: mode.clone(),
            target: TargetRule::Static(y.clone()),
            nlbp: g.run.nlbp,
        };
        let seed = g.run.seed.wrapping_add(i as u64);
        let out = sample_guided(&g.den, Some(&guide), &g.sched, &g.run.sampler, seed)?;
        let agreement = attribute_agreement(&g.cfg.data.spec, &out.x0, &data.labels[idx]);
        let residual = max_abs_diff(&mm.forward(&out.x0)?, &y);
        Ok((idx, seed, agreement, residual, out))
    });
    let rows: Vec<_> = rows.into_iter().collect::<Result<_, _>>()?;

    let mut w = create(&a.guidance.out)?;
    for (i, (idx, seed, agreement, residual, out)) in rows.iter().enumerate() {
        w.write(&json!({
            "run": i, "seed": seed, "target_index": idx, "x0": out.x0,
            "agreement": agreement, "residual": residual,
        }))?;
    }
    w.flush()?;
    let traj: Vec<(usize, &SampleResult)> = rows.iter().enumerate().map(|(i, r)| (i, &r.4)).collect();
    write_trajectories(a.guidance.metrics.as_deref(), &traj)?;

    let n = rows.len() as f64;
    let mean_agreement = rows.iter().map(|r| r.2).sum::<f64>() / n;
    let mean_residual = rows.iter().map(|r| r.3).sum::<f64>() / n;
    println!("{}", json!({"runs": rows.len(), "mean_agreement": mean_agreement, "mean_residual": mean_residual}));
    Ok(())
}

pub fn edit(a: EditArgs) -> Result<(), CliError> {
    let mut g = guided_setup(&a.guidance, true)?;
    g.run.nlbp.adaptive |= a.adaptive;
    g.run.nlbp.validate()?;
    let data = load_data(&a.data)?;
    check_data_fits(&g.model, &data)?;
    check_spec(&g.cfg, &data)?;
    if a.attribute >= g.model.output_dim() {
        return Err(CliError::Usage(format!(
            "attribute {} out of range for {} attributes",
            a.attribute,
            g.model.output_dim()
        )));
    }
    let logits = g.model.forward_batch(&data.samples, Exec::Parallel)?;
    let stats = attribute_stats(&data, Some(&logits))?;
    let (mm, mode) = g.run.nlbp.pinv_mode.resolve(&g.model, g.run.seed ^ 0xabcd);
    let guide = Guidance {
        model: &mm,
        mode,
        target: TargetRule::Dynamic {
            attribute: a.attribute,
            stats,
            covariance_adjust: a.covariance_adjust,
        },
        nlbp: g.run.nlbp,
    };
    let rows = par::map_range(Exec::Parallel, g.run.runs, |i| -> Result<_, CliError> {
        let seed = g.run.seed.wrapping_add(i as u64);
        let out = sample_guided(&g.den, Some(&guide), &g.sched, &g.run.sampler, seed)?;
        let decoded = g.cfg.data.spec.decode_attributes(&out.x0);
        let logits = mm.forward(&out.x0)?;
        Ok((seed, decoded, logits, out))
    });
    let rows: Vec<_> = rows.into_iter().collect::<Result<_, _>>()?;

    let mut w = create(&a.guidance.out)?;
    let mut forced = 0usize;
    for (i, (seed, decoded, logits, out)) in rows.iter().enumerate() {
        let hit = decoded[a.attribute] == 1;
        forced += hit as usize;
        w.write(&json!({
            "run": i, "seed": seed, "x0": out.x0, "logits": logits,
            "decoded": decoded, "forced": hit,
        }))?;
    }
    w.flush()?;
    let traj: Vec<(usize, &SampleResult)> = rows.iter().enumerate().map(|(i, r)| (i, &r.3)).collect();
    write_trajectories(a.guidance.metrics.as_deref(), &traj)?;
    println!(
        "{}",
        json!({"attribute": a.attribute, "runs": rows.len(), "success_rate": forced as f64 / rows.len() as f64})
    );
    Ok(())
}

pub fn verify(a: VerifyArgs) -> Result<(), CliError> {
    let cfg = load_config(&a.config)?;
    let m = Checkpoint::load(&a.model)?.model()?;
    let ablation_inputs = (a.denoiser.as_ref(), a.data.as_ref(), a.test_data.as_ref());
    let have_ablation = matches!(ablation_inputs, (Some(_), Some(_), Some(_)));
    if a.suite == Suite::Ablation && !have_ablation {
        return Err(CliError::Usage("the ablation suite needs --denoiser, --data and --test-data".into()));
    }

    let mut records: Vec<serde_json::Value> = Vec::new();
    let mut failed = Vec::new();
    let mut report = |suite: spnn::verify::SuiteReport| {
        for c in suite.cases {
            println!("{} {}/{} {:.3e} (tol {:.0e}{})", if c.pass { "PASS" } else { "FAIL" }, c.suite, c.case, c.value, c.tol, if c.expect_fail { ", must exceed" } else { "" });
            if !c.pass {
                failed.push(format!("{}/{}", c.suite, c.case));
            }
            records.push(serde_json::to_value(&c).expect("plain record"));
        }
    };
    if matches!(a.suite, Suite::Penrose | Suite::All) {
        report(run_penrose_suite(&m, a.samples, a.tol, a.seed)?);
    }
    if matches!(a.suite, Suite::Projection | Suite::All) {
        report(run_projection_suite(&m, a.samples, a.tol, a.seed)?);
    }
    if matches!(a.suite, Suite::Ablation | Suite::All) {
        if let (Some(dp), Some(trp), Some(tep)) = ablation_inputs {
            let den = Checkpoint::load(dp)?.denoiser()?;
            let train = load_data(trp)?;
            let test = load_data(tep)?;
            check_data_fits(&m, &train)?;
            check_data_fits(&m, &test)?;
            check_spec(&cfg, &test)?;
            let sched = cfg.diffusion.schedule()?;
            let ys = m.forward_batch(&train.samples, Exec::Parallel)?;
            let mut run = cfg.restore_run();
            run.runs = a.runs;
            run.seed = a.seed;
            let rep = run_ablation_grid(&m, &den, &sched, &cfg.data.spec, &test, &ys, &cfg.train, &run)?;
            for c in &rep.cells {
                println!("cell ablation/{}+{:?} agreement {:.3} residual {:.2e}", c.pinv, c.update, c.mean_agreement, c.mean_residual);
                records.push(serde_json::to_value(c).expect("plain record"));
            }
            let margin = rep.margin();
            let pass = margin >= a.min_margin;
            println!("{} ablation/margin {margin:+.3} (needs >= {:+.3})", if pass { "PASS" } else { "FAIL" }, a.min_margin);
            records.push(json!({"suite": "ablation", "case": "margin", "value": margin, "tol": a.min_margin, "pass": pass}));
            if !pass {
                failed.push("ablation/margin".into());
            }
        } else {
            println!("SKIP ablation (needs --denoiser, --data and --test-data)");
        }
    }
    if let Some(p) = &a.out {
        let mut w = create(p)?;
        w.write_all(&records)?;
        w.flush()?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(failed.join(", ")))
    }
}

/// Rows of numbers separated by whitespace or commas; `#` starts a comment.
fn parse_text_matrix(s: &str) -> Result<DenseMatrix, CliError> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (ln, line) in s.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("");
        let vals = line
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|t| !t.is_empty())
            .map(|t| t.parse::<f64>().map_err(|_| CliError::Usage(format!("line {}: not a number: {t:?}", ln + 1))))
            .collect::<Result<Vec<f64>, _>>()?;
        if !vals.is_empty() {
            rows.push(vals);
        }
    }
    let cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || rows.iter().any(|r| r.len() != cols) {
        return Err(CliError::Usage("matrix rows are empty or ragged".into()));
    }
    let slices: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    Ok(DenseMatrix::from_rows(&slices))
}

fn read_matrix(path: &Path) -> Result<DenseMatrix, CliError> {
    let bytes = std::fs::read(path)?;
    if let Ok(m) = DenseMatrix::from_bytes(&bytes) {
        return Ok(m);
    }
    let text = std::str::from_utf8(&bytes).map_err(|_| CliError::Usage("matrix file is neither text nor a matrix record".into()))?;
    parse_text_matrix(text)
}

pub fn pinv(a: PinvArgs) -> Result<(), CliError> {
    let m = read_matrix(&a.matrix_file)?;
    if !m.is_finite() {
        return Err(CliError::Usage("matrix has non-finite entries".into()));
    }
    let x = matrix_pinv(&m, a.rcond)?;
    let res = penrose_residuals(&m, &x)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    writeln!(out, "pinv {}x{}", x.rows(), x.cols())?;
    for i in 0..x.rows() {
        let row: Vec<String> = x.row(i).iter().map(|v| format!("{v}")).collect();
        writeln!(out, "{}", row.join(" "))?;
    }
    writeln!(out, "penrose residuals {:.3e} {:.3e} {:.3e} {:.3e}", res[0], res[1], res[2], res[3])?;
    if let Some(p) = &a.out {
        std::fs::write(p, x.to_bytes())?;
    }
    let worst = res.iter().fold(0.0f64, |a, b| a.max(*b));
    if worst > a.tol {
        return Err(CliError::Verification(format!("Penrose residual {worst:.3e} exceeds {:.0e}", a.tol)));
    }
    Ok(())
}
