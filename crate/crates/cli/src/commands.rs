use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use wavesense_core::audio::{design_filterbank, waveform_to_raster, FrontendConfig, Waveform};
use wavesense_core::data::{
    check_split_disjoint, load_manifest, load_split, read_raster, read_wav, save_dataset,
    save_split, Split, SplitData, SyntheticSpec,
};
use wavesense_core::eval::{load_stream_labels, threshold_sweep};
use wavesense_core::net::{
    parse_kv, state_footprint, temporal_memory, Network, WaveSenseConfig, REQUIRED_CONFIG_KEYS,
};
use wavesense_core::train::{
    evaluate, load_checkpoint, save_checkpoint, TrainConfig, Trainer,
};
use wavesense_core::{Error, Result};

use crate::Command;

pub fn run(command: Command, seed: Option<u64>) -> Result<()> {
    match command {
        Command::Preprocess { manifest, out, noise_dir, snr_db, seconds, n_bands, augment } => {
            preprocess(
                &manifest,
                &out,
                noise_dir.as_deref(),
                snr_db,
                seconds,
                n_bands,
                augment,
                seed,
            )
        }
        Command::SynthData { spec, out } => synth_data(&spec, &out, seed),
        Command::Train { config, data, out, log, overrides, early_stop_acc } => {
            train(&config, &data, &out, log, &overrides, early_stop_acc, seed)
        }
        Command::Eval { ckpt, data } => eval(&ckpt, &data),
        Command::Stream {
            ckpt,
            stream,
            labels,
            target_faph,
            lockout,
            match_window,
            grid_points,
        } => stream_cmd(&ckpt, &stream, &labels, target_faph, lockout, match_window, grid_points),
        Command::Gradcheck { config, eps, spiking } => gradcheck(config.as_deref(), eps, spiking, seed),
        Command::Inspect { ckpt, config } => inspect(ckpt.as_deref(), config.as_deref()),
    }
}

/// Parse a file holding both network and trainer keys; unknown keys are
/// rejected, the network keys are all required.
fn parse_combined_config(text: &str) -> Result<(WaveSenseConfig, TrainConfig)> {
    let mut net = WaveSenseConfig::aloha();
    net.tau_lp = None;
    let mut train = TrainConfig::default();
    let mut seen = HashSet::new();
    for (line, key, value) in parse_kv(text)? {
        let wrap = |e: Error| Error::Parse { line, msg: e.to_string() };
        if net.apply_key(&key, &value).map_err(wrap)? {
            seen.insert(key);
        } else if !train.apply_key(&key, &value).map_err(wrap)? {
            return Err(Error::Parse { line, msg: format!("unknown key '{key}'") });
        }
    }
    for required in REQUIRED_CONFIG_KEYS {
        if !seen.contains(*required) {
            return Err(Error::Config(format!("missing key '{required}'")));
        }
    }
    net.validate()?;
    train.validate()?;
    Ok((net, train))
}

fn apply_overrides(
    net: &mut WaveSenseConfig,
    train: &mut TrainConfig,
    overrides: &[String],
) -> Result<()> {
    for kv in overrides {
        let (key, value) = kv.split_once('=').ok_or_else(|| {
            Error::Config(format!("override '{kv}' is not KEY=VALUE"))
        })?;
        let (key, value) = (key.trim(), value.trim());
        if !net.apply_key(key, value)? && !train.apply_key(key, value)? {
            return Err(Error::Config(format!("unknown key '{key}'")));
        }
    }
    net.validate()?;
    train.validate()
}

fn print_resolved(net: &WaveSenseConfig, train: Option<&TrainConfig>) {
    println!("resolved network config:");
    for line in net.to_config_text().lines() {
        println!("  {line}");
    }
    if let Some(t) = train {
        println!("resolved trainer config:");
        println!("  lr = {}", t.lr);
        println!("  beta1 = {}", t.beta1);
        println!("  beta2 = {}", t.beta2);
        println!("  batch_size = {}", t.batch_size);
        println!("  epochs = {}", t.epochs);
        println!("  alpha = {}", t.alpha);
        println!("  grad_clip = {}", t.grad_clip);
        println!("  seed = {}", t.seed);
        println!("  deterministic = {}", t.deterministic);
    }
}

#[allow(clippy::too_many_arguments)]
fn preprocess(
    manifest: &Path,
    out: &Path,
    noise_dir: Option<&Path>,
    snr_db: f64,
    seconds: f64,
    n_bands: usize,
    augment: usize,
    seed: Option<u64>,
) -> Result<()> {
    if augment == 0 {
        return Err(Error::InvalidParameter("--augment must be >= 1".into()));
    }
    let seed = seed.unwrap_or(42);
    let (entries, warnings) = load_manifest(manifest)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    check_split_disjoint(&entries)?;
    let cfg = FrontendConfig {
        n_bands,
        target_secs: seconds,
        snr_db,
        ..Default::default()
    };
    println!(
        "preprocess: {} entries, {} bands in [{}, {}] Hz, {} s clips, snr {} dB, \
         augment x{augment}, seed {seed}",
        entries.len(),
        cfg.n_bands,
        cfg.f_lo,
        cfg.f_hi,
        cfg.target_secs,
        cfg.snr_db
    );
    let bank = design_filterbank(cfg.n_bands, cfg.f_lo, cfg.f_hi, 16_000.0)?;

    let noise_pool: Vec<Waveform> = match noise_dir {
        Some(dir) => {
            let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e == "wav"))
                .collect();
            paths.sort();
            if paths.is_empty() {
                return Err(Error::InvalidInput(format!(
                    "no .wav files under {}",
                    dir.display()
                )));
            }
            paths.iter().map(|p| read_wav(p)).collect::<Result<_>>()?
        }
        None => Vec::new(),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut splits = [SplitData::default(), SplitData::default(), SplitData::default()];
    for entry in &entries {
        if !entry.path.exists() {
            continue;
        }
        let wave = read_wav(&entry.path)?;
        // Noise augments the training split only; with --augment each
        // training clip is emitted several times under fresh noise draws.
        let copies = if entry.split == Split::Train { augment } else { 1 };
        for _ in 0..copies {
            let noise = if entry.split == Split::Train && !noise_pool.is_empty() {
                noise_pool.choose(&mut rng)
            } else {
                None
            };
            let raster = waveform_to_raster(&wave, noise, &bank, &cfg)?;
            let slot = match entry.split {
                Split::Train => &mut splits[0],
                Split::Val => &mut splits[1],
                Split::Test => &mut splits[2],
            };
            slot.push(raster, entry.label);
        }
    }
    fs::create_dir_all(out)?;
    for (split, data) in Split::all().iter().zip(&splits) {
        if !data.is_empty() {
            save_split(out, *split, data)?;
        }
        println!("  {}: {} rasters", split.as_str(), data.len());
    }
    Ok(())
}

fn synth_data(spec_path: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut spec = SyntheticSpec::from_config_str(&fs::read_to_string(spec_path)?)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    println!(
        "synth-data: {} classes, {}x{} bins, density {}, jitter {}, noise {}, {} per class, seed {}",
        spec.n_classes,
        spec.channels,
        spec.bins,
        spec.density,
        spec.jitter,
        spec.noise_rate,
        spec.n_per_class,
        spec.seed
    );
    let ds = wavesense_core::data::synth_keyword_dataset(&spec)?;
    fs::create_dir_all(out)?;
    save_dataset(out, &ds)?;
    println!(
        "  wrote train {} / val {} / test {} rasters to {}",
        ds.train.len(),
        ds.val.len(),
        ds.test.len(),
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train(
    config_path: &Path,
    data: &Path,
    out: &Path,
    log: Option<PathBuf>,
    overrides: &[String],
    early_stop_acc: Option<f64>,
    seed: Option<u64>,
) -> Result<()> {
    let (mut net_cfg, mut train_cfg) =
        parse_combined_config(&fs::read_to_string(config_path)?)?;
    apply_overrides(&mut net_cfg, &mut train_cfg, overrides)?;
    if let Some(s) = seed {
        train_cfg.seed = s;
    }
    print_resolved(&net_cfg, Some(&train_cfg));

    let train_data = load_split(data, Split::Train)?;
    let val_data = load_split(data, Split::Val)?;
    println!("data: {} train / {} val samples", train_data.len(), val_data.len());

    let log_path = log.unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".metrics.jsonl");
        PathBuf::from(p)
    });
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut log_file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)?;

    let network = Network::build(net_cfg, train_cfg.seed)?;
    println!("network: {} parameters", network.params().total_scalars());
    let mut trainer = Trainer::new(network, train_cfg)?;
    let out_path = out.to_path_buf();
    trainer.fit(&train_data, &val_data, early_stop_acc, |tr, record| {
        save_checkpoint(&out_path, tr)?;
        let line = serde_json::json!({
            "epoch": record.epoch,
            "split": "train",
            "loss": record.train.loss,
            "accuracy": record.train.accuracy,
            "spike_rates": record.train.layer_rates,
        });
        writeln!(log_file, "{line}")?;
        let line = serde_json::json!({
            "epoch": record.epoch,
            "split": "val",
            "loss": record.val.loss,
            "accuracy": record.val.accuracy,
            "excess_per_neuron_bin": record.val.mean_excess_per_neuron_bin,
        });
        writeln!(log_file, "{line}")?;
        println!(
            "epoch {:>3}: train loss {:.4} acc {:.3} | val loss {:.4} acc {:.3}",
            record.epoch, record.train.loss, record.train.accuracy,
            record.val.loss, record.val.accuracy
        );
        Ok(())
    })?;
    println!(
        "checkpoint: {} (config hash {:016x}), metrics: {}",
        out.display(),
        trainer.net.config().hash64(),
        log_path.display()
    );
    Ok(())
}

fn eval(ckpt: &Path, data: &Path) -> Result<()> {
    let checkpoint = load_checkpoint(ckpt)?;
    println!(
        "checkpoint: epoch {}, {} optimizer steps, config hash {:016x}",
        checkpoint.epoch,
        checkpoint.opt_step,
        checkpoint.config.hash64()
    );
    let net = Network::from_params(checkpoint.config, checkpoint.params)?;
    println!("{:<8} {:>8} {:>10} {:>10} {:>12}", "split", "samples", "loss", "accuracy", "excess/n-bin");
    for split in Split::all() {
        let idx = data.join(format!("{}.idx", split.as_str()));
        if !idx.exists() {
            continue;
        }
        let split_data = load_split(data, split)?;
        if split_data.is_empty() {
            continue;
        }
        let m = evaluate(&net, &split_data, wavesense_core::loss::DEFAULT_ACTIVITY_WEIGHT)?;
        println!(
            "{:<8} {:>8} {:>10.4} {:>10.4} {:>12.5}",
            split.as_str(),
            m.samples,
            m.loss,
            m.accuracy,
            m.mean_excess_per_neuron_bin
        );
    }
    Ok(())
}

fn stream_cmd(
    ckpt: &Path,
    stream: &Path,
    labels: &Path,
    target_faph: f64,
    lockout: f64,
    match_window: f64,
    grid_points: usize,
) -> Result<()> {
    let checkpoint = load_checkpoint(ckpt)?;
    let net = Network::from_params(checkpoint.config, checkpoint.params)?;
    let raster = read_raster(stream)?;
    let labels = load_stream_labels(labels)?;
    let hours = raster.bins() as f64 * raster.dt / 3600.0;
    println!(
        "stream: {} bins ({:.3} h), {} labeled keywords, lockout {lockout} s, match window {match_window} s",
        raster.bins(),
        hours,
        labels.len()
    );

    let (trace, _) = net.forward(&raster)?;
    let peak = trace.values().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if peak.is_nan() || peak <= 0.0 {
        return Err(Error::InvalidInput(
            "readout never rises above zero; nothing to sweep".into(),
        ));
    }
    let grid: Vec<f64> = (1..=grid_points.max(1))
        .map(|i| peak * i as f64 / (grid_points.max(1) as f64 + 1.0))
        .collect();
    let sweep = threshold_sweep(&net, &raster, &labels, &grid, target_faph, lockout, match_window)?;
    println!("{:>12} {:>8} {:>8} {:>12}", "threshold", "frr", "faph", "detections");
    for p in &sweep.points {
        println!(
            "{:>12.5} {:>8.4} {:>8.3} {:>12}",
            p.threshold, p.frr, p.faph, p.detections
        );
    }
    if sweep.met_target {
        println!(
            "operating point: threshold {:.5} -> FRR {:.4} at FAPH <= {target_faph}",
            sweep.threshold, sweep.frr
        );
    } else {
        println!(
            "no threshold met FAPH <= {target_faph}; strictest threshold {:.5} gives FRR {:.4}",
            sweep.threshold, sweep.frr
        );
    }
    Ok(())
}

/// Built-in gradient-check architecture: four blocks keep the unclipped
/// subthreshold cascade numerically tame.
fn gradcheck_default_config() -> WaveSenseConfig {
    WaveSenseConfig {
        dilations: vec![2, 4, 8, 16],
        ..WaveSenseConfig::aloha()
    }
}

fn gradcheck(config: Option<&Path>, eps: f64, spiking: bool, seed: Option<u64>) -> Result<()> {
    let seed = seed.unwrap_or(42);
    let net_cfg = match config {
        Some(p) => parse_combined_config(&fs::read_to_string(p)?)?.0,
        None => gradcheck_default_config(),
    };
    print_resolved(&net_cfg, None);
    let channels = net_cfg.n_channels_in;
    let net = Network::build(net_cfg, seed)?;
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let mut sample = wavesense_core::neuron::SpikeRaster::zeros(
        channels,
        100,
        wavesense_core::signal::DEFAULT_DT,
    );
    for c in 0..channels {
        for t in 0..100 {
            if rng.gen_bool(0.15) {
                sample.set(c, t, rng.gen_range(1..=3));
            }
        }
    }
    let report = net.finite_diff_check(&sample, eps, 200, spiking, seed ^ 0xD1FF)?;
    println!(
        "gradcheck ({}): {} parameters sampled, max relative error {:.3e}",
        if spiking { "spiking, informational" } else { "subthreshold" },
        report.checked,
        report.max_rel_err
    );
    if !spiking && report.max_rel_err >= 1e-4 {
        return Err(Error::Diverged(format!(
            "gradient check failed: {} >= 1e-4",
            report.max_rel_err
        )));
    }
    Ok(())
}

fn inspect(ckpt: Option<&Path>, config: Option<&Path>) -> Result<()> {
    let net_cfg = match (ckpt, config) {
        (Some(path), None) => {
            let checkpoint = load_checkpoint(path)?;
            println!(
                "checkpoint: version {}, epoch {}, {} optimizer steps, seed {}",
                checkpoint.version, checkpoint.epoch, checkpoint.opt_step, checkpoint.seed
            );
            checkpoint.config
        }
        (None, Some(path)) => parse_combined_config(&fs::read_to_string(path)?)?.0,
        _ => {
            return Err(Error::InvalidInput(
                "inspect needs exactly one of --ckpt or --config".into(),
            ))
        }
    };
    print_resolved(&net_cfg, None);
    let net = Network::build(net_cfg.clone(), 0)?;
    println!("parameters: {}", net.params().total_scalars());
    println!("spiking neurons: {}", net.n_spiking_neurons());
    println!("tau schedule (bins): fast {} everywhere; slow per block:", net_cfg.tau_s_base);
    let fp = state_footprint(&net_cfg);
    println!(
        "{:>6} {:>6} {:>14} {:>14}",
        "block", "tau", "buffered[k,d]", "state[k+1]"
    );
    for (i, layer) in fp.iter().enumerate() {
        println!(
            "{:>6} {:>6} {:>14} {:>14}",
            i, layer.dilation, layer.buffered, layer.stateful
        );
    }
    let buf: u64 = fp.iter().map(|l| l.buffered).sum();
    let state: u64 = fp.iter().map(|l| l.stateful).sum();
    println!("totals: buffered {buf} vs stateful {state} words per channel");
    let tm = temporal_memory(&net_cfg);
    println!(
        "temporal memory: {} bins ({} s at 10 ms bins)",
        tm,
        tm * wavesense_core::signal::DEFAULT_DT
    );
    println!("readout low-pass tau: {} bins", net_cfg.effective_tau_lp());
    Ok(())
}
