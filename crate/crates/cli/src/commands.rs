use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ebcn_core::analysis::{
    alpha_sweep, alpha_table_csv, heatmap_csv, localization, pooled_propagation, subsample_stability, HeatmapLayout,
    SimilarityMatrix, DEFAULT_ALPHAS,
};
use ebcn_core::cache::{corpus_to_cache, decode_cache, encode_cache, inspect, pair_records, pairs_to_cache};
use ebcn_core::compose::{branch_contribution, calibrate_gate, default_tau, score_composed, EnsembleManifest};
use ebcn_core::corruption::parse_kinds;
use ebcn_core::eval::{paired_accuracy, score_pairs};
use ebcn_core::kv::split_list;
use ebcn_core::testbed::{generate_corpus, learnability_gate, make_pairs};
use ebcn_core::trainer::train_branch;
use ebcn_core::{
    checkpoint, ConstraintNetwork, ContrastivePair, CorruptionKind, CorruptionSpec, DataSources, EmbeddingSequence,
    Error, KvMap, Label, NetworkConfig, Result, TestbedConfig, TrainConfig,
};

use crate::run::{Input, Run};
use crate::{Command, ConfigArgs, DataArgs};

pub struct Context {
    pub seed: Option<u64>,
    pub runs_dir: PathBuf,
}

const SECTIONS: &[&str] = &[
    "testbed",
    "gen",
    "net",
    "train",
    "corruption",
    "eval",
    "gate",
    "analysis",
];
const DEFAULT_KINDS: &str = "shuffle,splice";

pub fn dispatch(ctx: &Context, cmd: Command) -> Result<()> {
    match cmd {
        Command::GenSynthetic { cfg } => gen_synthetic(ctx, &cfg),
        Command::Corrupt { cfg, corpus } => corrupt(ctx, &cfg, &corpus),
        Command::Train { cfg, corpus, pairs } => train(ctx, &cfg, corpus.as_deref(), pairs.as_deref()),
        Command::Eval { cfg, checkpoint, data } => eval(ctx, &cfg, &checkpoint, &data),
        Command::Compose { cfg, manifest, data } => compose(ctx, &cfg, &manifest, &data),
        Command::CalibrateGate { cfg, manifest, data } => calibrate(ctx, &cfg, &manifest, &data),
        Command::AnalyzeDisplacement {
            cfg,
            checkpoint,
            corpus,
        } => displacement(ctx, &cfg, &checkpoint, &corpus),
        Command::SweepAlpha { cfg, checkpoint, data } => sweep_alpha(ctx, &cfg, &checkpoint, &data),
        Command::ExportHeatmap { cfg, checkpoint, data } => export_heatmap(ctx, &cfg, &checkpoint, &data),
        Command::CacheInspect { input } => cache_inspect(&input),
    }
}

fn load_config(args: &ConfigArgs) -> Result<KvMap> {
    let mut m = match &args.config {
        Some(p) => KvMap::parse(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => KvMap::new(),
    };
    for s in &args.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::config(s.clone(), "expected KEY=VALUE"))?;
        m.set(k.trim(), v.trim());
    }
    Ok(m)
}

/// Validates top-level keys, resolves the run seed and keeps only the
/// sections `sections` that the command reads.
fn effective(ctx: &Context, args: &ConfigArgs, sections: &[&str]) -> Result<(KvMap, u64)> {
    let raw = load_config(args)?;
    for k in raw.keys() {
        if k == "seed" {
            continue;
        }
        let top = k.split('.').next().unwrap_or("");
        if !SECTIONS.contains(&top) || !k.contains('.') {
            return Err(Error::config(k, "unknown key"));
        }
        if k.ends_with(".seed") {
            return Err(Error::config(k, "set the run seed with `seed` or --seed"));
        }
    }
    let seed = match ctx.seed {
        Some(s) => s,
        None => raw.get_or("seed", 0u64)?,
    };
    let mut out = KvMap::new();
    out.set("seed", seed);
    for (k, v) in raw.iter() {
        if sections.contains(&k.split('.').next().unwrap_or("")) {
            out.set(k, v);
        }
    }
    Ok((out, seed))
}

fn specs(cfg: &KvMap, default_kinds: &str) -> Result<Vec<CorruptionSpec>> {
    let c = cfg.section("corruption");
    c.check_known(&["kinds", "span_fraction", "magnitude", "window"])
        .map_err(|e| prefix_key(e, "corruption"))?;
    let kinds = parse_kinds(c.get("kinds").unwrap_or(default_kinds))?;
    if kinds.is_empty() {
        return Err(Error::config("corruption.kinds", "no kinds given"));
    }
    kinds
        .into_iter()
        .map(|k| {
            let d = CorruptionSpec::new(k, 0);
            let s = CorruptionSpec {
                span_fraction: c.get_or("span_fraction", d.span_fraction)?,
                magnitude: c.get_or("magnitude", d.magnitude)?,
                window: c.get_or("window", d.window)?,
                ..d
            };
            s.validate().map_err(|e| prefix_key(e, "corruption"))?;
            Ok(s)
        })
        .collect()
}

fn prefix_key(e: Error, section: &str) -> Error {
    match e {
        Error::Config { key, reason } => Error::config(format!("{section}.{key}"), reason),
        other => other,
    }
}

fn section(cfg: &KvMap, name: &str, known: &[&str]) -> Result<KvMap> {
    let s = cfg.section(name);
    s.check_known(known).map_err(|e| prefix_key(e, name))?;
    Ok(s)
}

fn read_corpus(path: &Path) -> Result<(Input, Vec<EmbeddingSequence>)> {
    let (input, bytes) = Input::read("corpus", path)?;
    let file = decode_cache(&bytes)?;
    let seqs: Vec<EmbeddingSequence> = file
        .records
        .iter()
        .filter(|r| r.label != Label::Corrupted)
        .map(|r| r.to_sequence())
        .collect();
    if seqs.is_empty() {
        return Err(Error::data(format!("{}: no coherent records", path.display())));
    }
    Ok((input, seqs))
}

fn read_pairs(path: &Path) -> Result<(Input, Vec<ContrastivePair>)> {
    let (input, bytes) = Input::read("pairs", path)?;
    let ds = pair_records(&decode_cache(&bytes)?)?;
    Ok((input, ds.pairs))
}

fn read_checkpoint(name: &str, path: &Path) -> Result<(Input, ConstraintNetwork)> {
    let (input, bytes) = Input::read(name, path)?;
    Ok((input, checkpoint::decode(&bytes)?))
}

/// Pairs from `--pairs`, or built from `--corpus` with the run seed.
fn eval_pairs(data: &DataArgs, cfg: &KvMap, seed: u64, default_kinds: &str) -> Result<(Input, Vec<ContrastivePair>)> {
    match (&data.pairs, &data.corpus) {
        (Some(p), None) => read_pairs(p),
        (None, Some(c)) => {
            let (input, seqs) = read_corpus(c)?;
            let specs = specs(cfg, default_kinds)?;
            Ok((input, make_pairs(&seqs, &specs, &seqs, seed)?))
        }
        _ => Err(Error::config("data", "give exactly one of --pairs or --corpus")),
    }
}

fn done(run: Run, summary: &str) -> Result<()> {
    let dir = run.finish()?;
    print!("{summary}");
    println!("run: {}", dir.display());
    Ok(())
}

fn gen_synthetic(ctx: &Context, args: &ConfigArgs) -> Result<()> {
    let (cfg, seed) = effective(ctx, args, &["testbed", "gen"])?;
    let mut tk = cfg.section("testbed");
    tk.set("seed", seed);
    let tb = TestbedConfig::from_kv(&tk).map_err(|e| prefix_key(e, "testbed"))?;
    let gate_pairs: usize = section(&cfg, "gen", &["gate_pairs"])?.get_or("gate_pairs", 500)?;
    // reject an unlearnable testbed before anything is written
    let baseline = (gate_pairs > 0)
        .then(|| learnability_gate(&tb, gate_pairs))
        .transpose()?;
    let mut run = Run::create(&ctx.runs_dir, "gen-synthetic", &cfg, &[], seed)?;
    let mut summary = String::new();
    if let Some(auc) = baseline {
        run.result("baseline_auc", auc);
        let _ = writeln!(summary, "baseline AUC on shuffle/splice pairs: {auc:.4}");
    }
    let corpus = generate_corpus(&tb)?;
    run.write("corpus", "corpus.ebcn", &encode_cache(&corpus_to_cache(&corpus)?)?)?;
    run.result("sequences", corpus.len());
    let _ = writeln!(
        summary,
        "{} sequences, {} positions, dim {}",
        corpus.len(),
        tb.positions,
        tb.dim
    );
    done(run, &summary)
}

fn corrupt(ctx: &Context, args: &ConfigArgs, corpus: &Path) -> Result<()> {
    let (cfg, seed) = effective(ctx, args, &["corruption"])?;
    let (input, seqs) = read_corpus(corpus)?;
    let specs = specs(&cfg, DEFAULT_KINDS)?;
    let mut run = Run::create(&ctx.runs_dir, "corrupt", &cfg, &[input], seed)?;
    let pairs = make_pairs(&seqs, &specs, &seqs, seed)?;
    run.write("pairs", "pairs.ebcn", &encode_cache(&pairs_to_cache(&pairs)?)?)?;
    let mut csv = String::from("kind,valid,invalid\n");
    for s in &specs {
        let name = s.kind.name();
        let valid = pairs.iter().filter(|p| p.kind == name && p.valid).count();
        let invalid = pairs.iter().filter(|p| p.kind == name && !p.valid).count();
        let _ = writeln!(csv, "{name},{valid},{invalid}");
    }
    run.write("validity", "validity.csv", csv.as_bytes())?;
    done(run, &csv)
}

fn train(ctx: &Context, args: &ConfigArgs, corpus: Option<&Path>, pairs: Option<&Path>) -> Result<()> {
    let (mut cfg, seed) = effective(ctx, args, &["net", "train", "corruption"])?;
    if corpus.is_none() && pairs.is_none() {
        return Err(Error::config("data", "give --corpus, --pairs or both"));
    }
    let mut inputs = Vec::new();
    let mut seqs = Vec::new();
    let mut ingested = Vec::new();
    if let Some(c) = corpus {
        let (i, s) = read_corpus(c)?;
        inputs.push(i);
        seqs = s;
    }
    if let Some(p) = pairs {
        let (i, ps) = read_pairs(p)?;
        inputs.push(i);
        ingested = ps;
    }
    let specs = if corpus.is_some() {
        specs(&cfg, DEFAULT_KINDS)?
    } else {
        Vec::new()
    };
    if !cfg.contains("net.input_dim") {
        let dim = seqs
            .first()
            .map(|s| s.dim())
            .or_else(|| ingested.first().map(|p| p.positive.dim()))
            .expect("at least one non-empty source");
        cfg.set("net.input_dim", dim);
    }
    let net_cfg = NetworkConfig::from_kv(&cfg.section("net")).map_err(|e| prefix_key(e, "net"))?;
    let mut tk = cfg.section("train");
    tk.set("seed", seed);
    let train_cfg = TrainConfig::from_kv(&tk).map_err(|e| prefix_key(e, "train"))?;

    let mut run = Run::create(&ctx.runs_dir, "train", &cfg, &inputs, seed)?;
    let sources = DataSources {
        corpus: &seqs,
        specs: &specs,
        paired: (!ingested.is_empty()).then_some(ingested.as_slice()),
    };
    let out = train_branch(&net_cfg, sources, &train_cfg, &mut |epoch, net| {
        run.write(
            &format!("checkpoint_e{epoch}"),
            &format!("checkpoint-e{epoch:03}.ebck"),
            &checkpoint::encode(net),
        )
        .map(|_| ())
    })?;
    run.write("model", "model.ebck", &checkpoint::encode(&out.network))?;
    run.write("log", "train_log.jsonl", out.log.to_jsonl().as_bytes())?;
    if !out.validation.is_empty() {
        run.write(
            "validation",
            "validation.ebcn",
            &encode_cache(&pairs_to_cache(&out.validation)?)?,
        )?;
    }
    let mut summary = format!("parameters: {}\n", out.network.param_count());
    if let Some(last) = out.log.last() {
        let fmt = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:.4}"));
        let _ = writeln!(
            summary,
            "epoch {}: train loss {}, val loss {}, val accuracy {}, val AUC {}",
            last.epoch,
            fmt(last.train_loss),
            fmt(last.val_loss),
            fmt(last.val_accuracy),
            fmt(last.val_auc)
        );
        run.result("epochs", last.epoch);
        if let Some(a) = last.val_accuracy {
            run.result("val_accuracy", a);
        }
        if let Some(a) = last.val_auc {
            run.result("val_auc", a);
        }
    }
    done(run, &summary)
}

fn eval(ctx: &Context, args: &ConfigArgs, ckpt: &Path, data: &DataArgs) -> Result<()> {
    let (cfg, seed) = effective(ctx, args, &["corruption", "eval"])?;
    let trained = split_list(
        section(&cfg, "eval", &["trained_kinds"])?
            .get("trained_kinds")
            .unwrap_or(""),
    );
    let (ci, net) = read_checkpoint("checkpoint", ckpt)?;
    let (di, pairs) = eval_pairs(data, &cfg, seed, DEFAULT_KINDS)?;
    let mut run = Run::create(&ctx.runs_dir, "eval", &cfg, &[ci, di], seed)?;
    let report = paired_accuracy(&score_pairs(&net, &pairs)?, &trained);
    run.write("report_csv", "report.csv", report.to_csv().as_bytes())?;
    let table = report.to_table();
    run.write("report_txt", "report.txt", table.as_bytes())?;
    if let Some(a) = report.overall.accuracy {
        run.result("accuracy", a);
    }
    if let Some(a) = report.auc {
        run.result("auc", a);
    }
    done(run, &table)
}

fn load_ensemble(path: &Path) -> Result<(Vec<Input>, EnsembleManifest)> {
    let (mi, bytes) = Input::read("manifest", path)?;
    let text = String::from_utf8(bytes).map_err(|_| Error::data(format!("{}: not UTF-8", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let m = EnsembleManifest::from_kv(&KvMap::parse(&text)?, base)?;
    let mut inputs = vec![mi];
    for (role, b) in [
        ("structural", Some(&m.structural)),
        ("frequency", m.frequency.as_ref()),
        ("local", m.local.as_ref()),
    ] {
        if let Some((p, _)) = b {
            inputs.push(Input::read(&format!("{role}_checkpoint"), p)?.0);
        }
    }
    Ok((inputs, m))
}

fn compose(ctx: &Context, args: &ConfigArgs, manifest: &Path, data: &DataArgs) -> Result<()> {
    let (cfg, seed) = effective(ctx, args, &["corruption", "eval"])?;
    let trained = split_list(
        section(&cfg, "eval", &["trained_kinds"])?
            .get("trained_kinds")
            .unwrap_or(""),
    );
    let (mut inputs, m) = load_ensemble(manifest)?;
    let ens = m.load()?;
    let (di, pairs) = eval_pairs(data, &cfg, seed, DEFAULT_KINDS)?;
    inputs.push(di);
    let mut run = Run::create(&ctx.runs_dir, "compose", &cfg, &inputs, seed)?;

    let report = paired_accuracy(&score_composed(&ens, &pairs)?, &trained);
    run.write("report_csv", "report.csv", report.to_csv().as_bytes())?;
    let mut branches = String::from("branch,accuracy,auc\n");
    for (role, b) in ens.branches() {
        let r = paired_accuracy(&score_pairs(&b.net, &pairs)?, &trained);
        let fmt = |v: Option<f64>| v.map_or("NA".to_string(), |x| x.to_string());
        let _ = writeln!(branches, "{},{},{}", role.name(), fmt(r.overall.accuracy), fmt(r.auc));
    }
    run.write("branches", "branches.csv", branches.as_bytes())?;
    let mut shares = String::from("branch,share\n");
    for (role, s) in branch_contribution(&ens, &pairs)? {
        let _ = writeln!(shares, "{},{s}", role.name());
    }
    run.write("contributions", "contributions.csv", shares.as_bytes())?;
    let table = report.to_table();
    run.write("report_txt", "report.txt", table.as_bytes())?;
    if let Some(a) = report.auc {
        run.result("auc", a);
    }
    done(run, &format!("{table}{branches}{shares}"))
}

fn calibrate(ctx: &Context, args: &ConfigArgs, manifest: &Path, data: &DataArgs) -> Result<()> {
    let (cfg, seed) = effective(ctx, args, &["corruption", "gate"])?;
    let g = section(&cfg, "gate", &["tau"])?;
    let (mut inputs, mut m) = load_ensemble(manifest)?;
    let ens = m.load()?;
    let freq = ens
        .frequency
        .as_ref()
        .ok_or_else(|| Error::config("frequency.checkpoint", "manifest has no frequency branch to gate"))?;
    let (di, pairs) = eval_pairs(data, &cfg, seed, DEFAULT_KINDS)?;
    inputs.push(di);
    let mut run = Run::create(&ctx.runs_dir, "calibrate-gate", &cfg, &inputs, seed)?;
    let tau = match g.get("tau") {
        Some(_) => g.require("tau")?,
        None => default_tau(&ens.structural.net, &pairs)?,
    };
    let d = calibrate_gate(&freq.net, &pairs, tau)?;
    let mut out = KvMap::new();
    out.set("gate", d.gate as u8);
    out.set("gap", d.gap);
    out.set("tau", d.tau);
    run.write("gate", "gate.kv", out.to_text().as_bytes())?;
    m.gate = d.gate;
    m.tau = Some(d.tau);
    for b in [Some(&mut m.structural), m.frequency.as_mut(), m.local.as_mut()]
        .into_iter()
        .flatten()
    {
        b.0 = std::fs::canonicalize(&b.0).map_err(|e| Error::io(&b.0, e))?;
    }
    run.write("ensemble", "ensemble.kv", m.to_kv().to_text().as_bytes())?;
    run.result("gate", d.gate as u8);
    done(run, &out.to_text())
}

fn displacement(ctx: &Context, args: &ConfigArgs, ckpt: &Path, corpus: &Path) -> Result<()> {
    let (cfg, seed) = effective(ctx, args, &["corruption", "analysis"])?;
    let a = section(&cfg, "analysis", &["samples", "subsets"])?;
    let samples: usize = a.get_or("samples", 200)?;
    let subsets: usize = a.get_or("subsets", 5)?;
    let all = CorruptionKind::ALL.map(|k| k.name()).join(",");
    let specs = specs(&cfg, &all)?;
    let (ci, net) = read_checkpoint("checkpoint", ckpt)?;
    let (di, seqs) = read_corpus(corpus)?;
    let mut run = Run::create(&ctx.runs_dir, "analyze-displacement", &cfg, &[ci, di], seed)?;
    let rep = subsample_stability(&net, &seqs, &specs, samples, subsets, seed)?;
    let csv = rep.full.to_csv();
    run.write("matrix", "displacement.csv", csv.as_bytes())?;
    let dev = SimilarityMatrix {
        kinds: rep.full.kinds.clone(),
        values: rep.deviation.clone(),
    };
    run.write("stability", "stability.csv", dev.to_csv().as_bytes())?;
    run.result("max_deviation", rep.max_deviation());
    let mut summary = csv;
    let _ = writeln!(summary, "max subsample deviation: {:.4}", rep.max_deviation());
    for k in &rep.full.kinds {
        if let Some(v) = rep.full.mean_off_diagonal(k) {
            let _ = writeln!(summary, "mean similarity to other kinds, {k}: {v:.4}");
        }
    }
    done(run, &summary)
}

fn sweep_alpha(ctx: &Context, args: &ConfigArgs, ckpt: &Path, data: &DataArgs) -> Result<()> {
    let (cfg, seed) = effective(ctx, args, &["corruption", "analysis"])?;
    let a = section(&cfg, "analysis", &["alphas"])?;
    let alphas: Vec<f64> = match a.get("alphas") {
        Some(list) => split_list(list)
            .iter()
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::config("analysis.alphas", format!("cannot parse `{s}`")))
            })
            .collect::<Result<_>>()?,
        None => DEFAULT_ALPHAS.to_vec(),
    };
    let (ci, net) = read_checkpoint("checkpoint", ckpt)?;
    let (di, pairs) = eval_pairs(data, &cfg, seed, DEFAULT_KINDS)?;
    let mut run = Run::create(&ctx.runs_dir, "sweep-alpha", &cfg, &[ci, di], seed)?;
    let rows = alpha_sweep(&score_pairs(&net, &pairs)?, &alphas)?;
    let csv = alpha_table_csv(&rows);
    run.write("table", "alpha.csv", csv.as_bytes())?;
    done(run, &csv)
}

fn export_heatmap(ctx: &Context, args: &ConfigArgs, ckpt: &Path, data: &DataArgs) -> Result<()> {
    let (cfg, seed) = effective(ctx, args, &["corruption", "analysis"])?;
    let a = section(&cfg, "analysis", &["layout", "index"])?;
    let layout: HeatmapLayout = a.get_or("layout", HeatmapLayout::Sequence)?;
    let (ci, net) = read_checkpoint("checkpoint", ckpt)?;
    let (di, pairs) = eval_pairs(data, &cfg, seed, DEFAULT_KINDS)?;
    let mut run = Run::create(&ctx.runs_dir, "export-heatmap", &cfg, &[ci, di], seed)?;
    let scored = score_pairs(&net, &pairs)?;
    let index = match a.get("index") {
        Some(_) => a.require::<usize>("index")?,
        None => scored
            .iter()
            .position(|p| p.valid)
            .ok_or_else(|| Error::data("no valid pairs"))?,
    };
    let pick = scored
        .get(index)
        .ok_or_else(|| Error::config("analysis.index", format!("only {} pairs", scored.len())))?;
    let s = pick
        .scores
        .as_ref()
        .ok_or_else(|| Error::data(format!("pair {index} is invalid (twins identical)")))?;
    run.write(
        "positive",
        "heatmap_positive.csv",
        heatmap_csv(&s.pos.per_position, layout, None)?.as_bytes(),
    )?;
    run.write(
        "negative",
        "heatmap_negative.csv",
        heatmap_csv(&s.neg.per_position, layout, Some(&pick.corrupted_positions))?.as_bytes(),
    )?;
    let prof = pooled_propagation(&scored)?;
    run.write("propagation", "propagation.csv", prof.to_csv().as_bytes())?;
    let loc = localization(&scored);
    run.result("localization_eligible", loc.eligible);
    run.result("localization_hits", loc.hits);
    let mut summary = format!("pair {index} ({})\n", pick.kind);
    match loc.fraction() {
        Some(f) => {
            let _ = writeln!(
                summary,
                "peak inside corrupted span: {}/{} ({f:.3})",
                loc.hits, loc.eligible
            );
        }
        None => summary.push_str("no pairs eligible for localization\n"),
    }
    done(run, &summary)
}

fn cache_inspect(path: &Path) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let file = decode_cache(&bytes)?;
    print!("{}", inspect(&file));
    Ok(())
}
