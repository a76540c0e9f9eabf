use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::{Path, PathBuf};

use rand_chacha::rand_core::SeedableRng;
use simat_core::dataset::{
    finish_benchmark, read_allowlist, read_caption_overrides, read_scene_graph, select_entries, BuildConfig,
};
use simat_core::eval::{recall_at_k, simat_score, sweep as run_sweep, HeadPair, project_dataset, ScoreReport};
use simat_core::oracle::{MockOracle, Oracle, OracleTable, RemoteConfig, RemoteOracle};
use simat_core::store::{load_dataset, read_embeddings, write_metadata};
use simat_core::synth::{alignable_features, generate_world, SynthConfig};
use simat_core::train::{
    apply_head, check_contrastive_batch, history_csv, train_heads, AdaptationHead, TrainConfig,
};
use simat_core::transform::Retriever;
use simat_core::{atomic_write, read_tsv, Dataset, Error, Field, TransformConfig, TransformationQuery};

use crate::manifest::{RunManifest, MANIFEST_FILE};
use crate::plot::{line_chart, Series};
use crate::{
    BuildArgs, CliError, EvalArgs, GradcheckArgs, OracleArgs, OracleKind, ReportFormat, RetrievalArgs, SweepArgs,
    SynthArgs, TrainArgs, TransformArgs, EXIT_DATA,
};

pub const ORACLE_URL_ENV: &str = "SIMAT_ORACLE_URL";
pub const IMAGE_HEAD_FILE: &str = "image_head.smhd";
pub const TEXT_HEAD_FILE: &str = "text_head.smhd";

type CliResult<T = ()> = Result<T, CliError>;

fn create_dir(dir: &Path) -> CliResult {
    std::fs::create_dir_all(dir).map_err(|e| CliError::data(format!("{}: {}", dir.display(), e)))
}

fn write(path: &Path, text: &str) -> CliResult {
    Ok(atomic_write(path, text.as_bytes())?)
}

fn oracle_url(args: &OracleArgs) -> CliResult<String> {
    args.oracle_url
        .clone()
        .or_else(|| std::env::var(ORACLE_URL_ENV).ok().filter(|v| !v.is_empty()))
        .ok_or_else(|| CliError::usage(format!("remote oracle needs --oracle-url or {}", ORACLE_URL_ENV)))
}

/// Oracle sources available to a command. `mock` and `captions` describe
/// the records the oracle will be asked about.
struct OracleSources<'a> {
    args: &'a OracleArgs,
    default_table: Option<PathBuf>,
    mock: MockOracle,
    captions: HashMap<String, String>,
    cache: PathBuf,
}

fn make_oracle(
    src: OracleSources<'_>,
    fallback: OracleKind,
    manifest: &mut RunManifest,
) -> CliResult<Option<Box<dyn Oracle>>> {
    let table = src.args.oracle_table.clone().or(src.default_table);
    let kind = src.args.oracle.unwrap_or(match (&src.args.oracle_table, fallback) {
        (Some(_), _) => OracleKind::Table,
        (None, k) => k,
    });
    manifest.note("oracle", kind);
    Ok(match kind {
        OracleKind::None => None,
        OracleKind::Mock => Some(Box::new(src.mock)),
        OracleKind::Table => {
            let path = table.ok_or_else(|| CliError::usage("table oracle needs --oracle-table"))?;
            manifest.input(&path)?;
            Some(Box::new(OracleTable::load(&path)?))
        }
        OracleKind::Remote => {
            let url = oracle_url(src.args)?;
            manifest.note("oracle_url", &url);
            Some(Box::new(RemoteOracle::new(RemoteConfig::new(url), src.captions, Some(src.cache))?))
        }
    })
}

pub fn build(args: &BuildArgs, config_file: Option<&Path>) -> CliResult {
    let mut manifest = RunManifest::new("build", args, config_file, Some(args.seed));
    let entries = read_scene_graph(&args.scene_graph)?;
    let subjects = read_allowlist(&args.subjects)?;
    let relations = read_allowlist(&args.relations)?;
    let overrides = match &args.captions {
        Some(p) => read_caption_overrides(p)?,
        None => HashMap::new(),
    };
    manifest.input(&args.scene_graph)?;
    manifest.input(&args.subjects)?;
    manifest.input(&args.relations)?;
    if let Some(p) = &args.captions {
        manifest.input(p)?;
    }
    let cfg = BuildConfig {
        max_objects_per_pair: args.max_objects,
        min_images_per_triplet: args.min_images,
        oracle_hi: args.oracle_hi,
        oracle_lo: args.oracle_lo,
        split_seed: args.seed,
        caption_template: args.template.clone(),
        ..BuildConfig::new(subjects, relations)
    };
    let selection = select_entries(&entries, &cfg, &overrides)?;
    create_dir(&args.out)?;
    let sources = OracleSources {
        args: &args.oracle,
        default_table: None,
        mock: MockOracle::from_records(&selection.images, &selection.captions),
        captions: selection
            .captions
            .iter()
            .map(|c| (c.caption_id.clone(), c.text.clone()))
            .collect(),
        cache: args.out.join("oracle.tsv"),
    };
    let oracle = make_oracle(sources, OracleKind::None, &mut manifest)?;
    let bench = finish_benchmark(selection, &cfg, oracle.as_deref())?;
    write_metadata(&args.out, &bench.images, &bench.captions, &bench.queries, &bench.words)?;
    manifest.note("filtered", bench.stats.oracle_filtered);
    manifest.note("stats", &bench.stats);
    manifest.write(&args.out)?;
    println!(
        "built {} images, {} captions, {} queries{} -> {}",
        bench.images.len(),
        bench.captions.len(),
        bench.queries.len(),
        if bench.stats.oracle_filtered { "" } else { " (unfiltered)" },
        args.out.display()
    );
    Ok(())
}

pub fn synth(args: &SynthArgs, config_file: Option<&Path>) -> CliResult {
    let cfg = SynthConfig {
        num_subjects: args.num_subjects,
        num_relations: args.num_relations,
        num_objects: args.num_objects,
        images_per_triplet: args.images_per_triplet,
        dim: args.dim,
        noise_sigma: args.sigma,
        triplet_density: args.density,
        seed: args.seed,
    };
    let world = generate_world(&cfg)?;
    create_dir(&args.out)?;
    world.write(&args.out)?;
    let mut manifest = RunManifest::new("synth", args, config_file, Some(args.seed));
    manifest.note("images", world.dataset.images().len());
    manifest.note("queries", world.dataset.queries().len());
    manifest.write(&args.out)?;
    println!(
        "synthesized {} images, {} captions, {} queries -> {}",
        world.dataset.images().len(),
        world.dataset.captions().len(),
        world.dataset.queries().len(),
        args.out.display()
    );
    Ok(())
}

fn read_pairs(path: &Path, image_ids: &[String], text_ids: &[String]) -> CliResult<Vec<(usize, usize)>> {
    let index = |ids: &[String]| -> HashMap<String, usize> {
        ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect()
    };
    let (ii, ti) = (index(image_ids), index(text_ids));
    let rows = read_tsv(path, &["image_id", "text_id"])?;
    let mut out = Vec::with_capacity(rows.len());
    let mut missing = Vec::new();
    for r in rows {
        match (ii.get(&r[0]), ti.get(&r[1])) {
            (Some(&i), Some(&t)) => out.push((i, t)),
            _ => missing.push(format!("pair ({}, {}) has no feature row", r[0], r[1])),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Validation { problems: missing }.into());
    }
    Ok(out)
}

pub fn train(args: &TrainArgs, config_file: Option<&Path>) -> CliResult {
    let mut manifest = RunManifest::new("train", args, config_file, Some(args.seed));
    let (images, texts, pairs) = match args.alignable_pairs {
        Some(n) => {
            let (i, t) = alignable_features(n, args.alignable_dim, args.seed)?;
            (i, t, (0..n).map(|k| (k, k)).collect::<Vec<_>>())
        }
        None => {
            let ipath = args.images.as_ref().expect("required by clap");
            let tpath = args.texts.as_ref().expect("required by clap");
            let (i, iids) = read_embeddings(ipath)?;
            let (t, tids) = read_embeddings(tpath)?;
            manifest.input(ipath)?;
            manifest.input(tpath)?;
            let pairs = match &args.pairs {
                Some(p) => {
                    manifest.input(p)?;
                    read_pairs(p, &iids, &tids)?
                }
                None if i.rows() == t.rows() => (0..i.rows()).map(|k| (k, k)).collect(),
                None => {
                    return Err(CliError::usage(format!(
                        "{} image rows vs {} text rows: pass --pairs",
                        i.rows(),
                        t.rows()
                    )))
                }
            };
            (i, t, pairs)
        }
    };
    let cfg = TrainConfig {
        tau: args.tau,
        learning_rate: args.lr,
        epochs: args.epochs,
        batch_size: args.batch_size,
        seed: args.seed,
        optimizer: args.optimizer.into(),
        head_kind: args.head.into(),
        output_dim: args.out_dim,
        hidden_dim: args.hidden,
        loss: args.loss.into(),
    };
    let outcome = train_heads(&images, &texts, &pairs, &cfg)?;
    create_dir(&args.out)?;
    outcome.image_head.save(&args.out.join(IMAGE_HEAD_FILE))?;
    outcome.text_head.save(&args.out.join(TEXT_HEAD_FILE))?;
    write(&args.out.join("loss_history.csv"), &history_csv(&outcome.history))?;

    // Recall needs one text per image; many-to-one pairings skip it.
    let one_to_one = {
        let (is, ts): (HashSet<usize>, HashSet<usize>) = pairs.iter().copied().unzip();
        is.len() == pairs.len() && ts.len() == pairs.len()
    };
    let recall = if one_to_one {
        let pi = apply_head(&outcome.image_head, &images)?;
        let pt = apply_head(&outcome.text_head, &texts)?;
        Some(recall_at_k(&pi, &pt, &pairs, 1)?)
    } else {
        None
    };
    manifest.note("tau", cfg.tau);
    manifest.note("train_recall_at_1", recall.map(|(t, i)| [t, i]));
    manifest.write(&args.out)?;
    println!(
        "trained {} heads on {} pairs: final loss {:.6}{} -> {}",
        cfg.head_kind,
        pairs.len(),
        outcome.history.last().copied().unwrap_or(f64::NAN),
        recall
            .map(|(t, i)| format!(", R@1 text {:.1} image {:.1}", t, i))
            .unwrap_or_default(),
        args.out.display()
    );
    Ok(())
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

pub fn gradcheck(args: &GradcheckArgs) -> CliResult {
    if args.batch < 1 || args.dim < 1 || args.batches < 1 {
        return Err(CliError::usage("batch, dim and batches must be positive"));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(args.seed);
    let mut worst = 0.0f64;
    for _ in 0..args.batches {
        let err = check_contrastive_batch(args.batch, args.dim, args.tau, args.eps, args.loss.into(), &mut rng)?;
        worst = worst.max(err);
    }
    println!("max relative error {:.3e} over {} batches", worst, args.batches);
    if worst < GRADCHECK_TOLERANCE {
        Ok(())
    } else {
        Err(CliError::numeric(format!(
            "gradient check failed: {:.3e} >= {:.0e}",
            worst, GRADCHECK_TOLERANCE
        )))
    }
}

fn transform_config(r: &RetrievalArgs, lambda: f64) -> TransformConfig {
    TransformConfig {
        lambda,
        strategy: r.strategy,
        top_n: r.topn,
        exclude_self: !r.include_self,
        delta_method: r.delta,
        unit_delta: r.unit_delta,
    }
}

fn load_heads(dir: &Path) -> CliResult<(AdaptationHead, AdaptationHead)> {
    Ok((
        AdaptationHead::load(&dir.join(IMAGE_HEAD_FILE))?,
        AdaptationHead::load(&dir.join(TEXT_HEAD_FILE))?,
    ))
}

fn load_bundle(data: &Path, heads: Option<&Path>) -> CliResult<Dataset> {
    let dataset = load_dataset(data)?;
    match heads {
        Some(dir) => {
            let (image, text) = load_heads(dir)?;
            Ok(project_dataset(&dataset, &image, &text)?)
        }
        None => Ok(dataset),
    }
}

fn adhoc_query(dataset: &Dataset, args: &TransformArgs) -> CliResult<TransformationQuery> {
    let image_id = args.image.as_deref().expect("required by clap");
    let from = args.from.as_deref().expect("required by clap");
    let to = args.to.as_deref().expect("required by clap");
    let image = dataset
        .image(image_id)
        .ok_or_else(|| CliError::usage(format!("unknown image `{}`", image_id)))?;
    for w in [from, to] {
        if !dataset.words().contains(w) {
            return Err(Error::Lookup(w.to_string()).into());
        }
    }
    let field = match args.field {
        Some(f) => f,
        None => *Field::ALL
            .iter()
            .find(|f| image.triplet.get(**f) == from)
            .ok_or_else(|| CliError::usage(format!("`{}` does not occur in {} {}", from, image_id, image.triplet)))?,
    };
    let target = image.triplet.with(field, to);
    Ok(TransformationQuery {
        query_id: simat_core::dataset::query_id(image_id, field, to),
        image_id: image_id.to_string(),
        field,
        source_word: from.to_string(),
        target_word: to.to_string(),
        target_caption_id: dataset
            .caption_for(&target)
            .map(|c| c.caption_id.clone())
            .unwrap_or_default(),
        weight: 1.0,
    })
}

pub fn transform(args: &TransformArgs) -> CliResult {
    let dataset = load_bundle(&args.data, args.heads.as_deref())?;
    let query = match &args.query {
        Some(id) => dataset
            .query(id)
            .cloned()
            .ok_or_else(|| CliError::usage(format!("unknown query `{}`", id)))?,
        None => adhoc_query(&dataset, args)?,
    };
    let cfg = transform_config(&args.retrieval, args.retrieval.lambda);
    cfg.validate()?;
    let retriever = Retriever::new(&dataset)?;
    let hits = retriever.run_query(&query, &cfg)?;
    let source = dataset.image(&query.image_id).expect("query resolved");
    println!(
        "{} {}: {} -> {} ({})",
        query.image_id, source.triplet, query.source_word, query.target_word, query.field
    );
    match dataset.caption(&query.target_caption_id) {
        Some(c) => println!("target {}: {}", c.caption_id, c.text),
        None => println!("target {}: no caption in bundle", source.triplet.with(query.field, &query.target_word)),
    }
    for (rank, h) in hits.iter().enumerate() {
        let triplet = dataset.image(&h.item_id).map(|i| i.triplet.to_string()).unwrap_or_default();
        println!("{:>3}  {}  {:.6}  {}", rank + 1, h.item_id, h.similarity, triplet);
    }
    Ok(())
}

fn eval_sources<'a>(args: &'a OracleArgs, data: &Path, dataset: &Dataset, out: &Path) -> (OracleSources<'a>, OracleKind) {
    let table = data.join("oracle.tsv");
    let fallback = if args.oracle_table.is_some() || table.exists() {
        OracleKind::Table
    } else {
        OracleKind::Mock
    };
    let src = OracleSources {
        args,
        default_table: table.exists().then_some(table),
        mock: MockOracle::from_dataset(dataset),
        captions: dataset
            .captions()
            .iter()
            .map(|c| (c.caption_id.clone(), c.text.clone()))
            .collect(),
        cache: out.join("oracle_cache.tsv"),
    };
    (src, fallback)
}

fn require_oracle(o: Option<Box<dyn Oracle>>) -> CliResult<Box<dyn Oracle>> {
    o.ok_or_else(|| CliError::usage("scoring needs an oracle other than `none`"))
}

/// Writes `missing_pairs.tsv` for coverage errors; passes other errors on.
fn coverage_exit(e: Error, out: &Path) -> CliError {
    if let Error::Coverage { missing, .. } = &e {
        let mut text = String::from("image_id\tcaption_id\n");
        for (i, c) in missing {
            text.push_str(&format!("{}\t{}\n", i, c));
        }
        let path = out.join("missing_pairs.tsv");
        if let Err(w) = atomic_write(&path, text.as_bytes()) {
            return w.into();
        }
        return CliError {
            code: EXIT_DATA,
            message: format!("{} ({} pairs listed in {})", e, missing.len(), path.display()),
        };
    }
    e.into()
}

fn write_report(report: &ScoreReport, args: &EvalArgs) -> CliResult {
    if matches!(args.format, ReportFormat::Json | ReportFormat::Both) {
        write(&args.out.join("report.json"), &report.to_json())?;
    }
    if matches!(args.format, ReportFormat::Csv | ReportFormat::Both) {
        write(&args.out.join("report.csv"), &report.to_csv())?;
    }
    if args.breakdown {
        write(&args.out.join("breakdown.csv"), &report.breakdown_csv())?;
    }
    Ok(())
}

pub fn eval(args: &EvalArgs, config_file: Option<&Path>) -> CliResult {
    let mut manifest = RunManifest::new("eval", args, config_file, None);
    let dataset = load_bundle(&args.data, args.heads.as_deref())?;
    manifest.input_dir(&args.data)?;
    if let Some(h) = &args.heads {
        manifest.input_dir(h)?;
    }
    let cfg = transform_config(&args.retrieval, args.retrieval.lambda);
    cfg.validate()?;
    create_dir(&args.out)?;
    let (src, fallback) = eval_sources(&args.oracle, &args.data, &dataset, &args.out);
    let oracle = require_oracle(make_oracle(src, fallback, &mut manifest)?)?;
    let retriever = Retriever::new(&dataset)?;
    let report = simat_score(&retriever, oracle.as_ref(), &cfg, args.split.split())
        .map_err(|e| coverage_exit(e, &args.out))?;
    write_report(&report, args)?;
    manifest.note("score", report.score);
    manifest.write(&args.out)?;
    println!(
        "SIMAT strategy={} lambda={} n={} split={} queries={}: {:.1}{}",
        report.strategy,
        report.lambda,
        report.n,
        report.split,
        report.num_queries,
        report.score,
        if report.caption_leaking { " (caption leaking)" } else { "" }
    );
    Ok(())
}

fn parse_heads_spec(spec: &str) -> CliResult<(f64, PathBuf)> {
    if let Some((tau, dir)) = spec.split_once('=') {
        let tau: f64 = tau
            .parse()
            .map_err(|_| CliError::usage(format!("bad temperature in --heads {}", spec)))?;
        return Ok((tau, PathBuf::from(dir)));
    }
    let dir = PathBuf::from(spec);
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::usage(format!("{}: {} (or pass TAU=DIR)", path.display(), e)))?;
    let json: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {}", path.display(), e)))?;
    let tau = json["config"]["tau"]
        .as_f64()
        .ok_or_else(|| CliError::usage(format!("{} has no config.tau; pass TAU=DIR", path.display())))?;
    Ok((tau, dir))
}

pub fn sweep(args: &SweepArgs, config_file: Option<&Path>) -> CliResult {
    if args.lambdas.is_empty() || args.strategies.is_empty() {
        return Err(CliError::usage("lambda grid and strategy list must be nonempty"));
    }
    let mut manifest = RunManifest::new("sweep", args, config_file, None);
    let dataset = load_dataset(&args.data)?;
    manifest.input_dir(&args.data)?;
    let mut heads = Vec::with_capacity(args.heads.len());
    for spec in &args.heads {
        let (tau, dir) = parse_heads_spec(spec)?;
        let (image, text) = load_heads(&dir)?;
        manifest.input_dir(&dir)?;
        heads.push(HeadPair { tau, image, text });
    }
    let base = TransformConfig {
        top_n: args.topn,
        delta_method: args.delta,
        unit_delta: args.unit_delta,
        ..TransformConfig::default()
    };
    base.validate()?;
    create_dir(&args.out)?;
    let (src, fallback) = eval_sources(&args.oracle, &args.data, &dataset, &args.out);
    let oracle = require_oracle(make_oracle(src, fallback, &mut manifest)?)?;
    let result = run_sweep(
        &dataset,
        &args.lambdas,
        &args.strategies,
        &heads,
        oracle.as_ref(),
        &base,
        args.split.split(),
    )
    .map_err(|e| coverage_exit(e, &args.out))?;

    let mut series: Vec<Series> = Vec::new();
    let mut keys: BTreeSet<String> = BTreeSet::new();
    for row in &result.rows {
        let label = match row.tau {
            Some(t) => format!("tau={} {}", t, row.strategy),
            None => row.strategy.to_string(),
        };
        if keys.insert(label.clone()) {
            series.push(Series { label: label.clone(), points: Vec::new() });
        }
        let s = series.iter_mut().find(|s| s.label == label).expect("inserted");
        s.points.push((row.lambda, row.score));
    }
    let svg = line_chart("SIMAT score vs lambda", "lambda", "score", (0.0, 100.0), &series);
    write(&args.out.join("sweep.csv"), &result.to_csv())?;
    write(&args.out.join("sweep_optima.csv"), &result.optima_csv())?;
    write(&args.out.join("sweep.svg"), &svg)?;
    manifest.write(&args.out)?;
    for o in &result.optima {
        println!(
            "{}{}: lambda* = {} score {:.1}",
            o.tau.map(|t| format!("tau={} ", t)).unwrap_or_default(),
            o.strategy,
            o.lambda_star,
            o.score
        );
    }
    Ok(())
}
