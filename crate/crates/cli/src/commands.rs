use std::fmt::Write as _;
use std::path::Path;

use bitctx_core::analysis::{per_branch_report, ErrorMode};
use bitctx_core::cost::{count_network, CostOptions};
use bitctx_core::network::{preset, Checkpoint};
use bitctx_core::train::sweep::BandMetric;
use bitctx_core::train::{
    data, evaluate, finetune_dynamic, sweep_replacement, train_step1, train_step2, SweepConfig, TrainConfig,
};
use bitctx_core::{Error, Network, NetworkSpec, Result};

use crate::config::{self, read_spec};
use crate::manifest::Manifest;
use crate::{
    BinerrArgs, Cli, Command, CountArgs, EvalArgs, ExportArgs, Format, Metric, Mode, ModelArg, SweepArgs, TrainArgs,
};

pub fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Train(a) => train(a, seed),
        Command::Eval(a) => eval(a, seed),
        Command::CountOps(a) => count_ops(a, seed),
        Command::AnalyzeBinerr(a) => analyze(a, seed),
        Command::Sweep(a) => sweep(a, seed),
        Command::ExportSpec(a) => export(a, seed),
    }
}

/// Prints `text` or writes it to `out` with a manifest.
fn emit(text: &str, out: Option<&Path>, manifest: Manifest) -> Result<()> {
    match out {
        Some(p) => manifest.write_with(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn model_spec(m: &ModelArg) -> Result<NetworkSpec> {
    match &m.spec {
        Some(p) => read_spec(p),
        None => preset(&m.preset),
    }
}

fn model_id(m: &ModelArg) -> String {
    match &m.spec {
        Some(p) => format!("spec={}", p.display()),
        None => format!("preset={}", m.preset),
    }
}

fn load_split(id: &str, spec: &NetworkSpec) -> Result<data::Split> {
    let s = data::open(id)?;
    Ok(data::Split {
        train: s.train.fit(spec.input_channels, spec.resolution)?,
        test: s.test.fit(spec.input_channels, spec.resolution)?,
        name: s.name,
    })
}

fn train(a: TrainArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg = config::load(a.config.as_deref(), &a.overrides)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let effective = toml::to_string(&cfg).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let spec = cfg.model.resolve()?;
    let split = load_split(&cfg.train.dataset, &spec)?;
    let t = &cfg.train;
    let (net, run) = if cfg.model.attach_dynamic {
        let init = cfg
            .init
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("model.attach_dynamic needs `init`".into()))?;
        let trained = Network::load(init)?;
        if trained.spec().hash()? != spec.hash()? {
            return Err(Error::Incompatible(format!(
                "`{}` holds `{}`, the config names `{}`",
                init.display(),
                trained.spec().name,
                spec.name
            )));
        }
        finetune_dynamic(&trained, &split.train, t)?
    } else {
        let mut net = Network::build(&spec, t.seed)?;
        let init = match &cfg.init {
            Some(p) => Checkpoint::load(p)?,
            None => Checkpoint::from_network(&net),
        };
        let run = match t.step {
            1 => {
                net.load_state(&init, true)?;
                train_step1(&mut net, &split.train, t)?
            }
            _ => train_step2(&mut net, &init, &split.train, t)?,
        };
        (net, run)
    };
    let m = evaluate(&net, &split.test, &split.train.normalization(), 100)?;
    let final_loss = run.history.last().copied().unwrap_or(f64::NAN);
    println!(
        "step={} iterations={} final_loss={final_loss:.6} top1={:.4} top5={:.4} test_loss={:.6}",
        t.step, t.iterations, m.top1, m.top5, m.loss
    );
    let manifest = Manifest::new("train", t.seed, &effective)
        .detail("spec", &net.spec().name)
        .detail("spec_hash", format!("{:016x}", net.spec().hash()?))
        .detail("dataset", &t.dataset)
        .detail("step", t.step)
        .detail("iterations", t.iterations)
        .detail("final_loss", format!("{final_loss:.6}"))
        .detail("top1", format!("{:.6}", m.top1))
        .detail("top5", format!("{:.6}", m.top5));
    manifest.write_with(&a.out, &run.checkpoint.to_bytes()?)
}

fn eval(a: EvalArgs, seed: Option<u64>) -> Result<()> {
    let net = Network::load(&a.checkpoint)?;
    let split = load_split(&a.dataset, net.spec())?;
    let m = evaluate(&net, &split.test, &split.train.normalization(), a.batch)?;
    let text = format!("top1,top5,loss\n{},{},{}\n", m.top1, m.top5, m.loss);
    let config = format!("checkpoint={}\ndataset={}\nbatch={}\n", a.checkpoint.display(), a.dataset, a.batch);
    emit(&text, a.out.as_deref(), Manifest::new("eval", seed.unwrap_or(0), &config))
}

fn count_ops(a: CountArgs, seed: Option<u64>) -> Result<()> {
    let spec = model_spec(&a.model)?;
    let report = count_network(&spec, CostOptions { mac_factor: a.mac_factor })?;
    let text = match a.format {
        Format::Table => report.to_table(),
        Format::Csv => report.to_delimited(','),
        Format::Tsv => report.to_delimited('\t'),
    };
    let config = format!("{}\nmac_factor={}\nformat={:?}\n", model_id(&a.model), a.mac_factor, a.format);
    emit(&text, a.out.as_deref(), Manifest::new("count-ops", seed.unwrap_or(0), &config))
}

fn analyze(a: BinerrArgs, seed: Option<u64>) -> Result<()> {
    let net = Network::load(&a.checkpoint)?;
    let mode = match a.mode {
        Mode::Xnor => ErrorMode::Xnor,
        Mode::Literal => ErrorMode::Literal,
    };
    let report = per_branch_report(&net, mode)?;
    let ordering: Vec<String> = report
        .ordering()
        .iter()
        .map(|(r, e)| format!("{} {e:.6}", r.tag()))
        .collect();
    eprintln!("mean error by branch, largest first: {}", ordering.join(" > "));
    let config = format!("checkpoint={}\nmode={:?}\n", a.checkpoint.display(), a.mode);
    emit(
        &report.to_delimited(','),
        a.out.as_deref(),
        Manifest::new("analyze-binerr", seed.unwrap_or(0), &config),
    )
}

fn sweep(a: SweepArgs, seed: Option<u64>) -> Result<()> {
    let base = model_spec(&ModelArg {
        preset: a.preset.clone(),
        spec: a.spec.clone(),
    })?;
    let seed = seed.unwrap_or(0);
    let training = (a.train_iterations > 0).then(|| {
        (
            TrainConfig::step1(a.train_iterations).with_seed(seed),
            TrainConfig::step2(a.train_iterations).with_seed(seed),
        )
    });
    let split = match training {
        Some(_) => Some(load_split(&a.dataset, &base)?),
        None => None,
    };
    let cfg = SweepConfig {
        points: a.points.clone(),
        mlp_per_conv: a.mlp_per_conv,
        band: a.band,
        metric: match a.metric {
            Metric::Ops => BandMetric::Ops,
            Metric::ConvFcOps => BandMetric::ConvFcOps,
        },
        training,
    };
    let rows = sweep_replacement(&base, &cfg, split.as_ref())?;
    let mut text = String::from("replaced,conv_layers,mlp_layers,ops,conv_fc_ops,ratio_to_base,ratio_to_prev,within_band,top1\n");
    for r in &rows {
        let top1 = r.top1.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(
            text,
            "{},{},{},{},{},{:.6},{:.6},{},{top1}",
            r.replaced, r.conv_layers, r.mlp_layers, r.ops, r.conv_fc_ops, r.ratio_to_base, r.ratio_to_prev, r.within_band
        );
    }
    let config = format!(
        "base={}\npoints={:?}\nmlp_per_conv={}\nband={}\nmetric={:?}\ntrain_iterations={}\ndataset={}\n",
        base.name, a.points, a.mlp_per_conv, a.band, a.metric, a.train_iterations, a.dataset
    );
    emit(&text, a.out.as_deref(), Manifest::new("sweep", seed, &config))
}

fn export(a: ExportArgs, seed: Option<u64>) -> Result<()> {
    let text = preset(&a.preset)?.to_toml()?;
    emit(
        &text,
        a.out.as_deref(),
        Manifest::new("export-spec", seed.unwrap_or(0), &format!("preset={}\n", a.preset)),
    )
}
