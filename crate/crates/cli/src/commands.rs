//! Subcommand implementations.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use mdq_core::entroc::{decode_container, encode_container, MdqContainer, MAGIC};
use mdq_core::imageio;
use mdq_core::networks::{CodecModel, NetConfig, DOWNSAMPLE};
use mdq_core::quant::Side;
use mdq_core::trainer::{
    checkpoint_from_bytes, evaluate, load_checkpoint, load_corpus, simulate, Checkpoint, TrainConfig, Trainer,
    CHECKPOINT_MAGIC, EVAL_HEADER, SIM_HEADER,
};
use mdq_core::Codec32;

use crate::args::{Cli, Command, DecodeArgs, Drop, EncodeArgs, EvalArgs, InfoArgs, SimulateArgs, TrainArgs};
use crate::error::{io_err, CliError, CliResult};

pub const TRAIN_LOG_HEADER: &str = "step,sigma,total,rate_a,rate_b,d1,d2,dd,dr";

pub fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = match &cli.config {
        Some(p) => TrainConfig::from_file(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match cli.command {
        Command::Train(a) => train(cfg, a),
        Command::Encode(a) => encode(a),
        Command::Decode(a) => decode(a),
        Command::Eval(a) => eval(a),
        Command::Simulate(a) => simulate_cmd(cfg.seed, a),
        Command::Info(a) => info(a),
    }
}

fn load_model(path: &Path) -> CliResult<Codec32> {
    Ok(load_checkpoint::<f32>(path)?.model)
}

fn emit(output: Option<&Path>, text: &str) -> CliResult<()> {
    match output {
        Some(p) => fs::write(p, text).map_err(io_err(p)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn train(mut cfg: TrainConfig, a: TrainArgs) -> CliResult<()> {
    for kv in &a.overrides {
        let (k, v) =
            kv.split_once('=').ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    cfg.validate()?;
    let corpus = load_corpus(&a.corpus, cfg.crop)?;
    let mut t = match &a.resume {
        Some(p) => Trainer::<f32>::resume(cfg, load_checkpoint(p)?)?,
        None => Trainer::<f32>::new(cfg)?,
    };
    let start = t.step();
    log::info!("training on {} images from step {start} to {}", corpus.len(), t.cfg.steps);
    let reports = t.run(&corpus, |_, _| {})?;
    t.save(&a.output)?;

    if let Some(p) = &a.log_csv {
        let mut csv = format!("{TRAIN_LOG_HEADER}\n");
        for (i, r) in reports.iter().enumerate() {
            let s = start + i as u64;
            writeln!(
                csv,
                "{s},{},{},{},{},{},{},{},{}",
                t.cfg.sigma.at(s),
                r.total,
                r.rate_a,
                r.rate_b,
                r.d1,
                r.d2,
                r.dd,
                r.dr
            )
            .expect("writing to a String");
        }
        fs::write(p, csv).map_err(io_err(p))?;
    }

    let rows = evaluate(&t.model, &corpus.eval_images::<f32>()?)?;
    let mean = |dec: &str| {
        let v: Vec<f64> = rows.iter().filter(|r| r.decoder == dec).map(|r| r.ms_ssim).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let (central, side) = (mean("central"), (mean("side_a") + mean("side_b")) / 2.0);
    if central < side {
        log::warn!("central MS-SSIM {central:.4} is below mean side MS-SSIM {side:.4}");
    }
    if let (Some(first), Some(last)) = (reports.first(), reports.last()) {
        println!("steps {}..{}: total {:.5} -> {:.5}", start, t.step(), first.total, last.total);
    }
    println!("training corpus MS-SSIM: central {central:.4}, mean side {side:.4}");
    println!("checkpoint written to {}", a.output.display());
    Ok(())
}

fn encode(a: EncodeArgs) -> CliResult<()> {
    let model = load_model(&a.model)?;
    let img = imageio::read_rgb(&a.input)?;
    let img = match imageio::center_crop_to_multiple(&img, DOWNSAMPLE as u32)? {
        Some(c) => {
            log::warn!(
                "{}x{} is not a multiple of {DOWNSAMPLE}; center-cropped to {}x{}",
                img.width(),
                img.height(),
                c.width(),
                c.height()
            );
            c
        }
        None => img,
    };
    let (sa, sb) = model.analyze(&imageio::to_tensor(&img))?;
    let c = encode_container(&model, &sa, &sb)?;
    let bytes = c.pack()?;
    fs::write(&a.output, &bytes).map_err(io_err(&a.output))?;
    for side in [Side::A, Side::B] {
        let d = c.description(side).expect("both descriptions are encoded");
        println!(
            "description {}: {} bytes, {:.6} bpp",
            side.tag(),
            d.payload.len(),
            c.description_bpp(side).unwrap_or(0.0)
        );
    }
    println!("total: {:.6} bpp ({}x{}, {} container bytes)", c.payload_bpp(), c.width, c.height, bytes.len());
    Ok(())
}

fn decode(a: DecodeArgs) -> CliResult<()> {
    let model = load_model(&a.model)?;
    let bytes = fs::read(&a.input).map_err(io_err(&a.input))?;
    let mut c = MdqContainer::unpack(&bytes)?;
    match a.drop {
        Some(Drop::A) => c = c.without(Side::A),
        Some(Drop::B) => c = c.without(Side::B),
        None => {}
    }
    let sa = decode_container(&model, &c, Side::A)?;
    let sb = decode_container(&model, &c, Side::B)?;
    let used = match (&sa, &sb) {
        (Some(_), Some(_)) => "central",
        (Some(_), None) => "side_a",
        (None, Some(_)) => "side_b",
        (None, None) => return Err(CliError::Usage("no description available to decode".into())),
    };
    let y = model.reconstruct(sa.as_ref(), sb.as_ref())?;
    imageio::save_tensor(&a.output, &y)?;
    println!("decoder: {used}");
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult<()> {
    let model = load_model(&a.model)?;
    let corpus = load_corpus(&a.corpus, DOWNSAMPLE)?;
    let rows = evaluate(&model, &corpus.eval_images::<f32>()?)?;
    let mut csv = format!("{EVAL_HEADER}\n");
    for r in &rows {
        csv.push_str(&r.csv());
        csv.push('\n');
    }
    emit(a.output.as_deref(), &csv)
}

fn simulate_cmd(seed: u64, a: SimulateArgs) -> CliResult<()> {
    let model = load_model(&a.model)?;
    let corpus = load_corpus(&a.corpus, DOWNSAMPLE)?;
    let rows = simulate(&model, &corpus.eval_images::<f32>()?, a.loss_prob, a.trials, seed)?;
    let mut csv = format!("{SIM_HEADER}\n");
    for r in &rows {
        csv.push_str(&r.csv());
        csv.push('\n');
    }
    emit(a.output.as_deref(), &csv)
}

fn info(a: InfoArgs) -> CliResult<()> {
    let bytes = fs::read(&a.input).map_err(io_err(&a.input))?;
    if bytes.starts_with(&MAGIC) {
        print!("{}", container_info(&MdqContainer::unpack(&bytes)?));
        Ok(())
    } else if bytes.starts_with(&CHECKPOINT_MAGIC) {
        print!("{}", checkpoint_info(&checkpoint_from_bytes::<f64>(&bytes)?)?);
        Ok(())
    } else {
        Err(CliError::Usage(format!("{}: neither a checkpoint nor an MDQ1 container", a.input.display())))
    }
}

fn container_info(c: &MdqContainer) -> String {
    let mut s = String::new();
    let w = &mut s;
    writeln!(w, "format: MDQ1").unwrap();
    writeln!(w, "image: {}x{}", c.width, c.height).unwrap();
    writeln!(w, "latent: {}x{}x{}", c.m, c.n, c.k).unwrap();
    writeln!(w, "levels: {}", c.l).unwrap();
    for side in [Side::A, Side::B] {
        match c.description(side) {
            Some(d) => writeln!(
                w,
                "description {}: present, {} payload bytes, {:.6} bpp, model {:016x}, checksum {:08x}",
                side.tag(),
                d.payload.len(),
                c.description_bpp(side).unwrap_or(0.0),
                d.model_hash,
                d.checksum
            )
            .unwrap(),
            None => writeln!(w, "description {}: absent", side.tag()).unwrap(),
        }
    }
    writeln!(w, "total: {:.6} bpp", c.payload_bpp()).unwrap();
    s
}

fn checkpoint_info(ck: &Checkpoint<f64>) -> CliResult<String> {
    let m = &ck.model;
    let cfg = &m.cfg;
    let mut s = String::new();
    let w = &mut s;
    writeln!(w, "format: checkpoint").unwrap();
    writeln!(
        w,
        "network: base_channels {} k {} l {} resconv_repeats {} share_decoders {} use_importance {} entropy_channels {} ssim {}",
        cfg.base_channels,
        cfg.latent_channels,
        cfg.levels,
        cfg.resconv_repeats,
        cfg.share_decoders,
        cfg.use_importance,
        cfg.entropy_channels,
        cfg.ssim_preset.name()
    )
    .unwrap();
    match &ck.adam {
        Some(a) => writeln!(w, "optimizer: adam, step {}", a.step).unwrap(),
        None => writeln!(w, "optimizer: none").unwrap(),
    }
    let census = m.param_census();
    writeln!(w, "component,params").unwrap();
    for (c, n) in &census.rows {
        writeln!(w, "{c},{n}").unwrap();
    }
    writeln!(w, "total,{}", census.total).unwrap();
    let (shared, separate) = sharing_totals(cfg, census.total)?;
    writeln!(w, "sharing ratio: {:.4} ({shared} shared / {separate} separate)", shared as f64 / separate as f64)
        .unwrap();
    Ok(s)
}

/// Trainable totals of the sharing and non-sharing variants of `cfg`.
fn sharing_totals(cfg: &NetConfig, own: usize) -> CliResult<(usize, usize)> {
    let other = NetConfig { share_decoders: !cfg.share_decoders, ..cfg.clone() };
    let other_total = CodecModel::<f32>::new(other, 0)?.param_census().total;
    Ok(if cfg.share_decoders { (own, other_total) } else { (other_total, own) })
}
