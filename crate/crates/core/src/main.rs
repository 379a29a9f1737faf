use std::collections::BTreeSet;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use cryptojack::collector::{self, CrawlConfig};
use cryptojack::config::Config;
use cryptojack::economics::{self, PayoutModel};
use cryptojack::similarity::{self, Linkage};
use cryptojack::telemetry::{self, VisitRecord};
use cryptojack::{blacklist, fingerprint, pool, profile, report, testbed, wallet, wasm};

#[derive(Parser)]
#[command(name = "cryptojack", version, about = "Detect and measure in-browser cryptocurrency miners")]
struct Cli {
    /// TOML file overriding the default thresholds.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Input file (usually a visit archive).
    #[arg(long = "in", global = true)]
    input: Option<PathBuf>,
    /// Output file or directory; stdout when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Visit every target through one or more DevTools endpoints.
    Collect {
        /// DevTools WebSocket URL of a browser; repeat for several
        #[arg(long, required = true)]
        endpoint: Vec<String>,
        /// Target list, one `url` or `rank,url` per line.
        #[arg(long)]
        targets: PathBuf,
        /// 1: short profile of every target. 2: long profile
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
        phase: u8,
        /// Core count the browser reports; defaults to the config
        #[arg(long)]
        cores: Option<u32>,
        /// Maximum concurrent sessions, one per endpoint
        #[arg(long)]
        parallel: Option<usize>,
        /// Profiling window; defaults to the phase's config value
        #[arg(long)]
        profile_ms: Option<u64>,
        /// Store only script hashes.
        #[arg(long)]
        no_sources: bool,
    },
    /// Phase-1 candidate flags per record.
    Phase1,
    /// Phase-2 verdicts and throttle estimates per record.
    Phase2,
    /// Run one analysis phase (same as `phase1` / `phase2`).
    Analyze {
        #[arg(value_enum)]
        phase: Phase,
    },
    /// Build fingerprints from active miners or apply them to a corpus
    #[command(subcommand)]
    Fingerprint(FingerprintCmd),
    /// Full three-phase pipeline.
    Detect {
        /// Phase-2 archive with long profiles of suspicious sites.
        #[arg(long)]
        phase2: PathBuf,
    },
    /// Extract and decode wallet addresses and site keys
    #[command(subcommand)]
    Wallets(WalletCmd),
    /// Daily revenue estimates.
    Revenue {
        /// CSV `site,visits_per_day,avg_duration_s`.
        #[arg(long, conflicts_with = "hours")]
        stats: Option<PathBuf>,
        /// Total visitor hours per day, for an upper bound.
        #[arg(long)]
        hours: Option<f64>,
        /// USD per XMR.
        #[arg(long)]
        rate: Option<f64>,
        /// XMR per million hashes.
        #[arg(long)]
        payout: Option<f64>,
        /// Hashes per second of a visitor's CPU.
        #[arg(long)]
        hps: Option<f64>,
    },
    /// Code similarity matrix and clusters; writes into the `--out` directory.
    Cluster {
        #[arg(long, value_enum, default_value_t = What::Js)]
        what: What,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        cut: Option<f64>,
        #[arg(long)]
        linkage: Option<Linkage>,
    },
    /// Compare detected sites with filter lists.
    Blacklist {
        /// Detected sites, one per line.
        #[arg(long)]
        sites: PathBuf,
        /// Filter list as `name=path`.
        #[arg(long = "list", required = true)]
        lists: Vec<String>,
    },
    /// Distribution tables over detected sites; writes into the `--out` directory.
    Report {
        /// Detected sites, one per line.
        #[arg(long)]
        sites: PathBuf,
        /// CSV `site,country`.
        #[arg(long)]
        geo: Option<PathBuf>,
        /// CSV `site,category` (`;` separates several).
        #[arg(long)]
        categories: Option<PathBuf>,
        /// Width of a popularity-rank bin
        #[arg(long)]
        bin_size: Option<u32>,
    },
    /// Parse Wasm modules and hash their function bodies
    #[command(subcommand)]
    Wasm(WasmCmd),
    /// Write the synthetic throttle testbed as an archive.
    Testbed {
        #[arg(long, default_value_t = 4)]
        cores: u32,
        #[arg(long, default_value_t = 30_000.0)]
        profile_ms: f64,
        #[arg(long, default_value_t = 5)]
        benign: usize,
    },
    /// Run the local instrumented mining pool
    #[command(subcommand)]
    Pool(PoolCmd),
    /// Print the effective configuration.
    Config,
}

#[derive(Clone, Copy, ValueEnum)]
enum Phase {
    Phase1,
    Phase2,
}

#[derive(Clone, Copy, ValueEnum)]
enum What {
    Js,
    Wasm,
}

#[derive(Subcommand)]
enum FingerprintCmd {
    /// Build fingerprints from the active miners of a phase-2 archive.
    Build {
        #[arg(long)]
        fraction: Option<f64>,
    },
    /// Sites of an archive matching a fingerprint file.
    Apply {
        #[arg(long)]
        prints: PathBuf,
        /// Already confirmed sites, one per line.
        #[arg(long)]
        confirmed: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum WalletCmd {
    /// Wallets, site-keys and pools seen in each record.
    Scan {
        /// Prefix table `prefix_hex = currency`.
        #[arg(long)]
        prefixes: Option<PathBuf>,
    },
    /// Check one address.
    Check {
        address: String,
        #[arg(long)]
        prefixes: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum WasmCmd {
    /// Code-base hash over all functions of the given modules.
    Hash {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Function bodies with their sizes and SHA-1.
    Dump { file: PathBuf },
}

#[derive(Subcommand)]
enum PoolCmd {
    /// Run the test pool until interrupted.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8892")]
        bind: std::net::SocketAddr,
        #[arg(long, default_value = "ffffff00")]
        target: String,
    },
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn input(cli: &Cli) -> Result<&Path> {
    cli.input.as_deref().context("--in is required for this command")
}

fn archive(path: &Path) -> Result<Vec<VisitRecord>> {
    telemetry::load_archive(path).with_context(|| format!("reading {}", path.display()))
}

fn site_list(path: &Path) -> Result<BTreeSet<String>> {
    let f = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    let mut out = BTreeSet::new();
    for line in f.lines() {
        let line = line?;
        let line = line.trim();
        if !line.is_empty() && !line.starts_with('#') {
            out.insert(line.to_owned());
        }
    }
    Ok(out)
}

fn out_dir(cli: &Cli) -> Result<PathBuf> {
    let dir = cli.out.clone().context("--out <dir> is required for this command")?;
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn prefix_table(path: &Option<PathBuf>) -> Result<wallet::PrefixTable> {
    Ok(match path {
        Some(p) => wallet::PrefixTable::parse(&std::fs::read_to_string(p)?)?,
        None => wallet::PrefixTable::default(),
    })
}

fn write_line<W: Write>(w: &mut W, value: &serde_json::Value) -> Result<()> {
    serde_json::to_writer(&mut *w, value)?;
    w.write_all(b"\n")?;
    Ok(())
}

fn phase1(cli: &Cli, cfg: &Config) -> Result<()> {
    let records = archive(input(cli)?)?;
    let mut w = output(&cli.out)?;
    for r in &records {
        let f = profile::phase1_flags(r, cfg.phase1.load_threshold_pct, cfg.phase1.worker_threshold);
        write_line(&mut w, &json!({"site": r.site, "flags": f, "candidate": f.candidate()}))?;
    }
    w.flush()?;
    Ok(())
}

fn phase2(cli: &Cli, cfg: &Config) -> Result<()> {
    let records = archive(input(cli)?)?;
    let mut w = output(&cli.out)?;
    for r in &records {
        let v = match profile::phase2_verdict(r, cfg.phase2.load_threshold_pct) {
            Ok(v) => v,
            Err(e) => {
                tracing::warn!("{e}");
                continue;
            }
        };
        let throttle = economics::estimate_throttle(r, &v).ok();
        write_line(&mut w, &json!({"site": r.site, "verdict": v, "throttle": throttle}))?;
    }
    w.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    match &cli.cmd {
        Cmd::Collect {
            endpoint,
            targets,
            phase,
            cores,
            parallel,
            profile_ms,
            no_sources,
        } => {
            let mut cc = CrawlConfig::from_config(&cfg, *phase);
            if let Some(c) = cores {
                if *c == 0 {
                    bail!("--cores must be >= 1");
                }
                cc.reported_cores = *c;
            }
            if let Some(p) = parallel {
                cc.parallel_sessions = (*p).max(1);
            }
            if let Some(p) = profile_ms {
                cc.profile_ms = *p;
            }
            cc.keep_sources = !no_sources;
            let targets = collector::parse_targets(&std::fs::read_to_string(targets)?);
            let rt = tokio::runtime::Runtime::new()?;
            let results = rt.block_on(collector::crawl(targets, endpoint.clone(), cc));
            let mut w = output(&cli.out)?;
            let mut failed = 0;
            for (target, res) in results {
                match res {
                    Ok(rec) => {
                        w.write_all(&telemetry::encode_visit(&rec)?)?;
                        w.write_all(b"\n")?;
                    }
                    Err(e) => {
                        failed += 1;
                        tracing::error!(url = %target.url, "{e}");
                    }
                }
            }
            w.flush()?;
            if failed > 0 {
                eprintln!("{failed} visits failed");
            }
        }
        Cmd::Phase1 | Cmd::Analyze { phase: Phase::Phase1 } => phase1(&cli, &cfg)?,
        Cmd::Phase2 | Cmd::Analyze { phase: Phase::Phase2 } => phase2(&cli, &cfg)?,
        Cmd::Fingerprint(FingerprintCmd::Build { fraction }) => {
            let records = archive(input(&cli)?)?;
            let judged: Vec<_> = records
                .into_iter()
                .filter_map(|r| {
                    let v = profile::phase2_verdict(&r, cfg.phase2.load_threshold_pct).ok()?;
                    Some((r, v))
                })
                .collect();
            let prints = fingerprint::build_fingerprints(
                &judged,
                fraction.unwrap_or(cfg.fingerprint.min_support_fraction),
            )?;
            fingerprint::write_fingerprints(output(&cli.out)?, &prints)?;
        }
        Cmd::Fingerprint(FingerprintCmd::Apply { prints, confirmed }) => {
            let records = archive(input(&cli)?)?;
            let prints = fingerprint::read_fingerprints(BufReader::new(File::open(prints)?))?;
            let confirmed = match confirmed {
                Some(p) => site_list(p)?,
                None => BTreeSet::new(),
            };
            let mut w = output(&cli.out)?;
            for site in fingerprint::apply_fingerprints(&records, &prints, &confirmed) {
                writeln!(w, "{site}")?;
            }
            w.flush()?;
        }
        Cmd::Detect { phase2 } => {
            let c1 = archive(input(&cli)?)?;
            let c2 = archive(phase2)?;
            let result = report::run_pipeline(&c1, &c2, &cfg);
            eprintln!("{}", result.summary());
            let mut w = output(&cli.out)?;
            serde_json::to_writer_pretty(&mut w, &result)?;
            writeln!(w)?;
            w.flush()?;
        }
        Cmd::Wallets(WalletCmd::Scan { prefixes }) => {
            let table = prefix_table(prefixes)?;
            let records = archive(input(&cli)?)?;
            let mut w = output(&cli.out)?;
            let mut observations = Vec::new();
            for r in &records {
                let scan = wallet::scan_visit(r, &table);
                if scan == wallet::ScanResult::default() {
                    continue;
                }
                observations.extend(scan.wallets.iter().map(|a| (r.site.clone(), a.text.clone())));
                observations.extend(scan.sitekeys.iter().map(|k| (r.site.clone(), k.clone())));
                write_line(
                    &mut w,
                    &json!({"site": r.site, "wallets": scan.wallets, "sitekeys": scan.sitekeys, "pools": scan.pools}),
                )?;
            }
            w.flush()?;
            let (graph, _) = wallet::group_by_identity(&observations);
            eprintln!(
                "{} identities over {} sites, {} bridging sites",
                graph.identities.len(),
                graph.sites.len(),
                graph.bridging_sites().len()
            );
        }
        Cmd::Wallets(WalletCmd::Check { address, prefixes }) => {
            let table = prefix_table(prefixes)?;
            let a = wallet::WalletAddress::parse(address, &table)?;
            println!("currency={} checksum_ok={}", a.currency, a.checksum_ok);
            if !a.checksum_ok {
                std::process::exit(1);
            }
        }
        Cmd::Revenue {
            stats,
            hours,
            rate,
            payout,
            hps,
        } => {
            let model = PayoutModel {
                hash_rate_hps: hps.unwrap_or(cfg.payout.hash_rate_hps),
                payout_xmr_per_mhash: payout.unwrap_or(cfg.payout.payout_xmr_per_mhash),
                xmr_usd: rate.unwrap_or(cfg.payout.xmr_usd),
            };
            let mut w = csv::Writer::from_writer(output(&cli.out)?);
            w.write_record(["site", "core_hours_per_day", "hashes_per_day", "xmr_per_day", "usd_per_day"])?;
            let mut row = |site: &str, e: &economics::RevenueEstimate| -> Result<()> {
                let (xmr, usd) = e.display();
                w.write_record([
                    site.to_owned(),
                    format!("{:.0}", e.core_hours_per_day),
                    format!("{:.0}", e.hashes_per_day),
                    xmr,
                    usd,
                ])?;
                Ok(())
            };
            match (stats, hours) {
                (Some(p), _) => {
                    for s in economics::read_visit_stats(File::open(p)?)? {
                        row(&s.site, &economics::estimate_revenue(&s, &model)?)?;
                    }
                }
                (None, Some(h)) => row("(upper bound)", &economics::upper_bound(*h, &model)?)?,
                (None, None) => bail!("give --stats or --hours"),
            }
            w.flush()?;
        }
        Cmd::Cluster { what, n, cut, linkage } => {
            let records = archive(input(&cli)?)?;
            let samples = match what {
                What::Js => similarity::js_samples(&records),
                What::Wasm => similarity::wasm_samples(&records),
            };
            if samples.is_empty() {
                bail!("no samples in the archive");
            }
            let n = n.unwrap_or(cfg.similarity.ngram);
            let cut = cut.unwrap_or(cfg.similarity.cut_similarity);
            let linkage = linkage.unwrap_or(cfg.similarity.linkage);
            let ids: Vec<String> = samples.iter().map(|(id, _)| id.clone()).collect();
            let vectors = samples
                .iter()
                .map(|(_, doc)| similarity::vectorize(doc, n))
                .collect::<Result<Vec<_>, _>>()?;
            let clusters = similarity::cluster_with(&vectors, cut, linkage)?;
            let matrix = similarity::similarity_matrix_with(&vectors, cut, linkage)?;
            let dir = out_dir(&cli)?;
            similarity::write_matrix_csv(File::create(dir.join("matrix.csv"))?, &ids, &matrix)?;
            similarity::write_clusters_csv(File::create(dir.join("clusters.csv"))?, &ids, &clusters)?;
            eprintln!(
                "{} samples, {} clusters, {} with two or more members",
                ids.len(),
                clusters.cluster_count(),
                clusters.major_clusters()
            );
        }
        Cmd::Blacklist { sites, lists } => {
            let records = archive(input(&cli)?)?;
            let ours = site_list(sites)?;
            let mut parsed = Vec::new();
            for spec in lists {
                let (name, path) = spec.split_once('=').context("--list expects name=path")?;
                let report = blacklist::parse_rules(&std::fs::read_to_string(path)?);
                for (line, why) in &report.malformed {
                    tracing::warn!(list = name, line, "{why}");
                }
                parsed.push((name.to_owned(), report.rules));
            }
            let stats = blacklist::compare(&ours, &parsed, &records);
            blacklist::write_stats_csv(output(&cli.out)?, &stats)?;
        }
        Cmd::Report {
            sites,
            geo,
            categories,
            bin_size,
        } => {
            let records = archive(input(&cli)?)?;
            let miners = site_list(sites)?;
            let dir = out_dir(&cli)?;
            let hist = report::rank_histogram(&miners, &records, bin_size.unwrap_or(cfg.report.rank_bin_size));
            report::write_rank_csv(File::create(dir.join("ranks.csv"))?, &hist)?;
            let mut tables = report::EnrichmentTables::default();
            if let Some(p) = geo {
                tables.geo = report::read_enrichment(File::open(p)?)?;
            }
            if let Some(p) = categories {
                tables.categories = report::read_enrichment(File::open(p)?)?;
            }
            tables.unknown_sites(&records);
            if geo.is_some() {
                let rows = report::tabulate(&tables.geo, &miners);
                report::write_table_csv(File::create(dir.join("countries.csv"))?, "country", &rows)?;
            }
            if categories.is_some() {
                let rows = report::tabulate(&tables.categories, &miners);
                report::write_table_csv(File::create(dir.join("categories.csv"))?, "category", &rows)?;
            }
        }
        Cmd::Wasm(WasmCmd::Hash { files }) => {
            let mut arts = Vec::new();
            for file in files {
                let m = wasm::parse_module(&std::fs::read(file)?).with_context(|| file.display().to_string())?;
                arts.push(telemetry::WasmArtifact {
                    origin_script_id: file.display().to_string(),
                    function_bodies: m.function_bodies,
                });
            }
            println!("{}", wasm::codebase_hash(&arts)?.to_hex());
        }
        Cmd::Wasm(WasmCmd::Dump { file }) => {
            let m = wasm::parse_module(&std::fs::read(file)?)?;
            println!("version {} functions {}", m.version, m.function_bodies.len());
            for (i, b) in m.function_bodies.iter().enumerate() {
                println!("{i}\t{}\t{}", b.len(), wasm::sha1_hex(b));
            }
        }
        Cmd::Testbed {
            cores,
            profile_ms,
            benign,
        } => {
            let (miners, controls) = testbed::testbed_corpus(*cores, *profile_ms, *benign);
            let all: Vec<VisitRecord> = miners.into_iter().chain(controls).collect();
            telemetry::write_archive(output(&cli.out)?, all.iter())?;
        }
        Cmd::Pool(PoolCmd::Serve { bind, target }) => {
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let handle = pool::serve_pool(
                    *bind,
                    pool::PoolConfig {
                        target: target.clone(),
                    },
                )
                .await?;
                eprintln!("pool listening on {}", handle.url());
                tokio::signal::ctrl_c().await?;
                for (identity, hashes) in handle.credits().await? {
                    println!("{}\t{hashes}", serde_json::to_string(&identity)?);
                }
                anyhow::Ok(())
            })?;
        }
        Cmd::Config => print!("{}", cfg.to_toml()),
    }
    Ok(())
}

fn is_broken_pipe(e: &(dyn std::error::Error + 'static)) -> bool {
    let kind = if let Some(io) = e.downcast_ref::<io::Error>() {
        Some(io.kind())
    } else if let Some(cryptojack::telemetry::TelemetryError::Io(io)) = e.downcast_ref() {
        Some(io.kind())
    } else if let Some(c) = e.downcast_ref::<csv::Error>() {
        match c.kind() {
            csv::ErrorKind::Io(io) => Some(io.kind()),
            _ => None,
        }
    } else {
        e.downcast_ref::<serde_json::Error>().and_then(|j| j.io_error_kind())
    };
    kind == Some(io::ErrorKind::BrokenPipe)
}

fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(io::stderr)
        .init();
    if let Err(e) = run(Cli::parse()) {
        // a closed downstream pipe (`| head`) is not a failure
        if e.chain().any(is_broken_pipe) {
            return;
        }
        eprintln!("error: {e:#}");
        std::process::exit(2);
    }
}
