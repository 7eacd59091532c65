use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ovcd::dataset::{DatasetManifest, SupportManifest};
use ovcd::eval::{EvalMode, ScoredRasters};
use ovcd::feature::read_feature_map;
use ovcd::fusion::{binarize_cam, fuse_inference, refine_pseudo_label, CamMap, FusionConfig};
use ovcd::mask::{read_mask_file, read_mask_set, write_mask_file, MaskSet};
use ovcd::pipeline::{evaluate_predictions, run_pipeline, sweep_alpha, write_semantic_map, Calibration, PipelineConfig};
use ovcd::proposal::{propose_changes, rescore, ChangeProposal, Epoch, ProposalConfig};
use ovcd::prototype::{
    build_prototypes, check_support, load_prototypes, load_support, save_prototypes, PrototypeBuildConfig,
};
use ovcd::retrieval::{assign_categories, rasterize, Strategy};
use ovcd::synth::{generate, SynthConfig};
use ovcd::{Error, Result};

#[derive(Parser)]
#[command(name = "ovcd", version, about = "Open-vocabulary change detection over precomputed features and masks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Mean,
    Max,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Mean => Strategy::CategoryMean,
            StrategyArg::Max => Strategy::GlobalMax,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Standard,
    OracleId,
    OracleProposal,
}

impl From<ModeArg> for EvalMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Standard => EvalMode::Standard,
            ModeArg::OracleId => EvalMode::OracleIdentification,
            ModeArg::OracleProposal => EvalMode::OracleChangeProposal,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RastersArg {
    Both,
    T1,
    T2,
}

impl From<RastersArg> for ScoredRasters {
    fn from(r: RastersArg) -> Self {
        match r {
            RastersArg::Both => ScoredRasters::Both,
            RastersArg::T1 => ScoredRasters::T1,
            RastersArg::T2 => ScoredRasters::T2,
        }
    }
}

#[derive(clap::Args)]
struct ProposalArgs {
    /// Keep proposals with change score strictly above this.
    #[arg(long, allow_hyphen_values = true)]
    alpha: Option<f64>,
    #[arg(long)]
    nms_iou: Option<f64>,
    #[arg(long)]
    min_area: Option<usize>,
}

impl ProposalArgs {
    fn apply(&self, cfg: &mut ProposalConfig) {
        if let Some(a) = self.alpha {
            cfg.alpha = a;
        }
        if let Some(t) = self.nms_iou {
            cfg.nms_iou_threshold = t;
        }
        if let Some(m) = self.min_area {
            cfg.min_area = m;
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic dataset with exact ground truth.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// TOML file with generator settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        pairs: Option<usize>,
        /// Comma-separated class names.
        #[arg(long, value_delimiter = ',', conflicts_with = "n_classes")]
        classes: Option<Vec<String>>,
        /// Generate this many classes named class_1 .. class_n.
        #[arg(long)]
        n_classes: Option<usize>,
        #[arg(long, alias = "spread")]
        cluster_spread: Option<f64>,
    },
    /// Pool support regions and cluster them into per-class prototypes.
    BuildPrototypes {
        #[arg(long)]
        support: PathBuf,
        /// Output sidecar path; the tensor is written next to it with an `.ovft` extension.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_iters: Option<usize>,
    },
    /// Write change proposals for every pair in a manifest.
    Propose {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Pipeline TOML whose `[proposal]` section supplies defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        proposal: ProposalArgs,
    },
    /// Identify categories for proposals, writing semantic change maps.
    Retrieve {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        prototypes: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Directory of `<id>.proposals.json` files from `propose`. Without it,
        /// proposals are generated first.
        #[arg(long)]
        proposals: Option<PathBuf>,
        /// Pipeline TOML whose `[proposal]` and `[retrieval]` sections supply defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
        /// Drop proposals whose epochs retrieve the same class.
        #[arg(long)]
        discard_same_class: bool,
        #[command(flatten)]
        proposal: ProposalArgs,
    },
    /// Binarize a CAM and refine it with mask proposals.
    Refine {
        /// Single-channel OVFT tensor.
        #[arg(long)]
        cam: PathBuf,
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        gamma1: Option<f64>,
    },
    /// Keep proposals that overlap a predicted change region.
    Fuse {
        #[arg(long)]
        proposals: PathBuf,
        #[arg(long)]
        region: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        gamma2: Option<f64>,
    },
    /// Score predictions against ground truth, or run an oracle diagnostic.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory of `<id>.semantic.json` files (standard mode).
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        prototypes: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "standard")]
        mode: ModeArg,
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
        /// Temporal rasters scored per class.
        #[arg(long, value_enum, default_value = "both")]
        rasters: RastersArg,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Sweep the change-score threshold and report scores at each value.
    Calibrate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        prototypes: PathBuf,
        /// Pipeline TOML supplying every other setting.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated thresholds; overrides the range.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        alphas: Option<Vec<f64>>,
        #[arg(long, default_value_t = -1.0, allow_hyphen_values = true)]
        from: f64,
        #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
        to: f64,
        #[arg(long, default_value_t = 0.1)]
        step: f64,
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
        #[arg(long)]
        fuse: bool,
        /// Writes `calibration.json` here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Read every file a manifest, support set or prototype bank references
    /// and check that sizes and classes agree.
    Validate {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        support: Option<PathBuf>,
        #[arg(long)]
        prototypes: Option<PathBuf>,
    },
    /// Run proposals, retrieval, optional fusion and evaluation from a TOML config.
    Pipeline {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        prototypes: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
        #[arg(long, allow_hyphen_values = true)]
        alpha: Option<f64>,
        #[arg(long)]
        gamma2: Option<f64>,
        /// Filter proposals by each pair's change-region sidecar.
        #[arg(long)]
        fuse: bool,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Temporal rasters scored per class.
        #[arg(long, value_enum)]
        rasters: Option<RastersArg>,
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn progress(msg: &str) {
    eprintln!("{msg}");
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|source| Error::Io { path: p.to_path_buf(), source })
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    std::fs::write(p, text).map_err(|source| Error::Io { path: p.to_path_buf(), source })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { out, config, seed, pairs, classes, n_classes, cluster_spread } => {
            let mut cfg = config.map(SynthConfig::load).transpose()?.unwrap_or_default();
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(n) = pairs {
                cfg.n_pairs = n;
            }
            if let Some(c) = classes {
                cfg.classes = c;
            }
            if let Some(n) = n_classes {
                cfg = cfg.with_n_classes(n);
            }
            if let Some(s) = cluster_spread {
                cfg.cluster_spread = s;
            }
            let o = generate(&cfg, &out)?;
            progress(&format!("wrote {} and {}", o.manifest.display(), o.support.display()));
        }
        Command::BuildPrototypes { support, out, k, seed, max_iters } => {
            let mut cfg = PrototypeBuildConfig::default();
            if let Some(k) = k {
                cfg.k = k;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(m) = max_iters {
                cfg.max_iters = m;
            }
            let manifest = SupportManifest::load(&support)?;
            let (vocab, samples) = load_support(&manifest)?;
            progress(&format!("pooling {} support samples over {} classes", samples.len(), vocab.len()));
            let bank = build_prototypes(&samples, &vocab, &cfg)?;
            save_prototypes(&bank, &out)?;
            progress(&format!("wrote {} prototypes to {}", bank.total_prototypes(), out.display()));
        }
        Command::Propose { manifest, out, config, proposal } => {
            let mut cfg = load_config(config)?.proposal;
            proposal.apply(&mut cfg);
            let m = DatasetManifest::load(&manifest)?;
            mkdir(&out)?;
            for pair in &m.pairs {
                let ps = propose_changes(pair, &cfg)?;
                write_proposals(&out, &pair.id, &ps, m.image_height, m.image_width)?;
                progress(&format!("{}: {} proposals", pair.id, ps.len()));
            }
        }
        Command::Retrieve { manifest, prototypes, out, proposals, config, strategy, discard_same_class, proposal } => {
            let base = load_config(config)?;
            let mut cfg = base.proposal;
            proposal.apply(&mut cfg);
            let mut rcfg = base.retrieval;
            if let Some(s) = strategy {
                rcfg.strategy = s.into();
            }
            rcfg.discard_same_class |= discard_same_class;
            let m = DatasetManifest::load(&manifest)?;
            let bank = load_prototypes(&prototypes, None)?;
            mkdir(&out)?;
            for pair in &m.pairs {
                let ps = match &proposals {
                    Some(dir) => {
                        let (f1, f2) = pair.load_features().map_err(|e| e.in_pair(&pair.id))?;
                        let set = read_mask_set(dir.join(format!("{}.proposals.json", pair.id)))
                            .map_err(|e| e.in_pair(&pair.id))?;
                        rescore(&f1, &f2, &set).map_err(|e| e.in_pair(&pair.id))?
                    }
                    None => propose_changes(pair, &cfg)?,
                };
                let run = || {
                    let asg = assign_categories(&ps, &bank, &rcfg)?;
                    rasterize(&asg, &ps, m.image_height, m.image_width)
                };
                let map = run().map_err(|e: Error| e.in_pair(&pair.id))?;
                write_proposals(&out, &pair.id, &ps, m.image_height, m.image_width)?;
                write_semantic_map(out.join(format!("{}.semantic.json", pair.id)), &map)?;
                progress(&format!("{}: {} proposals", pair.id, ps.len()));
            }
        }
        Command::Refine { cam, masks, out, beta, gamma1 } => {
            let mut cfg = FusionConfig::default();
            cfg.beta = beta.unwrap_or(cfg.beta);
            cfg.gamma1 = gamma1.unwrap_or(cfg.gamma1);
            cfg.validate()?;
            let masks = read_mask_set(&masks)?;
            let (h, w) = masks.dims();
            let cam = CamMap::from_feature_map(read_feature_map(&cam)?, h, w)?;
            let coarse = binarize_cam(&cam, cfg.beta)?;
            let refined = refine_pseudo_label(&coarse, &masks, cfg.gamma1)?;
            progress(&format!("pseudo label: {} px coarse, {} px refined", coarse.area(), refined.area()));
            write_mask_file(&out, &MaskSet::new(h, w, vec![refined])?, None)?;
        }
        Command::Fuse { proposals, region, out, gamma2 } => {
            let mut cfg = FusionConfig::default();
            cfg.gamma2 = gamma2.unwrap_or(cfg.gamma2);
            cfg.validate()?;
            let file = read_mask_file(&proposals)?;
            let set = file.to_set()?;
            let scores = file.scores();
            let ps: Vec<ChangeProposal> = set
                .masks()
                .iter()
                .zip(&scores)
                .map(|(m, s)| ChangeProposal {
                    mask: m.clone(),
                    z1: Vec::new(),
                    z2: Vec::new(),
                    change_score: s.unwrap_or(0.0),
                    source: Epoch::T1,
                })
                .collect();
            let region = read_mask_set(&region)?.union();
            let kept = fuse_inference(&ps, &region, cfg.gamma2)?;
            progress(&format!("kept {} of {} proposals", kept.len(), ps.len()));
            let (h, w) = set.dims();
            let keep_scores = scores.iter().any(Option::is_some);
            let kept_scores: Vec<f64> = kept.iter().map(|p| p.change_score).collect();
            write_mask_file(
                &out,
                &MaskSet::new(h, w, kept.into_iter().map(|p| p.mask).collect())?,
                keep_scores.then_some(kept_scores.as_slice()),
            )?;
        }
        Command::Evaluate { manifest, predictions, prototypes, out, mode, strategy, rasters, jobs } => {
            let mode: EvalMode = mode.into();
            let report = match (mode, predictions) {
                (EvalMode::Standard, Some(pred)) => {
                    evaluate_predictions(&DatasetManifest::load(&manifest)?, pred, rasters.into())?
                },
                (_, Some(_)) => {
                    return Err(Error::Config {
                        field: "predictions".into(),
                        detail: "only standard mode scores existing predictions".into(),
                    })
                }
                (mode, None) => {
                    let mut cfg = PipelineConfig {
                        manifest: Some(manifest),
                        prototypes,
                        output_dir: out.clone(),
                        mode,
                        rasters: rasters.into(),
                        ..Default::default()
                    };
                    if let Some(s) = strategy {
                        cfg.retrieval.strategy = s.into();
                    }
                    cfg.jobs = jobs.unwrap_or(0);
                    run_pipeline(&cfg, &progress)?.report
                }
            };
            if let Some(out) = &out {
                mkdir(out)?;
                write_text(&out.join("report.json"), &report.to_json())?;
                write_text(&out.join("report.txt"), &report.to_table())?;
            }
            print!("{}", report.to_table());
        }
        Command::Calibrate { manifest, prototypes, config, alphas, from, to, step, strategy, fuse, out, jobs } => {
            let mut cfg = load_config(config)?;
            cfg.manifest = Some(manifest);
            cfg.prototypes = Some(prototypes);
            if let Some(s) = strategy {
                cfg.retrieval.strategy = s.into();
            }
            cfg.fuse |= fuse;
            if let Some(j) = jobs {
                cfg.jobs = j;
            }
            let alphas = match alphas {
                Some(a) => a,
                None => alpha_grid(from, to, step)?,
            };
            let cal = Calibration::new(sweep_alpha(&cfg, &alphas)?);
            let best = cal.best_alpha;
            let pct = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.2}"));
            println!("{:>7} {:>9} {:>8} {:>8} {:>8} {:>8}", "alpha", "proposals", "IoU", "F1", "mIoU", "mF1");
            for p in &cal.points {
                let b = p.report.binary.as_ref();
                println!(
                    "{:>7.3} {:>9} {:>8} {:>8} {:>8} {:>8}{}",
                    p.alpha,
                    p.n_proposals,
                    pct(b.map(|b| b.iou)),
                    pct(b.map(|b| b.f1)),
                    pct(p.report.miou),
                    pct(p.report.mf1),
                    if Some(p.alpha) == best { "  *" } else { "" }
                );
            }
            if let Some(out) = out {
                mkdir(&out)?;
                write_text(&out.join("calibration.json"), &cal.to_json())?;
            }
        }
        Command::Validate { manifest, support, prototypes } => {
            if manifest.is_none() && support.is_none() && prototypes.is_none() {
                return Err(Error::Config {
                    field: "validate".into(),
                    detail: "give at least one of --manifest, --support, --prototypes".into(),
                });
            }
            if let Some(p) = manifest {
                let n = DatasetManifest::load(&p)?.check_files()?;
                progress(&format!("{}: {n} files ok", p.display()));
            }
            if let Some(p) = support {
                let n = check_support(&SupportManifest::load(&p)?)?;
                progress(&format!("{}: {n} samples ok", p.display()));
            }
            if let Some(p) = prototypes {
                let bank = load_prototypes(&p, None)?;
                progress(&format!("{}: {} prototypes ok", p.display(), bank.total_prototypes()));
            }
        }
        Command::Pipeline { config, manifest, prototypes, out, strategy, alpha, gamma2, fuse, mode, rasters, jobs, seed } => {
            let mut cfg = config.map(PipelineConfig::load).transpose()?.unwrap_or_default();
            cfg.apply_env();
            if manifest.is_some() {
                cfg.manifest = manifest;
            }
            if prototypes.is_some() {
                cfg.prototypes = prototypes;
            }
            if out.is_some() {
                cfg.output_dir = out;
            }
            if let Some(s) = strategy {
                cfg.retrieval.strategy = s.into();
            }
            if let Some(a) = alpha {
                cfg.proposal.alpha = a;
            }
            if let Some(g) = gamma2 {
                cfg.fusion.gamma2 = g;
            }
            cfg.fuse |= fuse;
            if let Some(m) = mode {
                cfg.mode = m.into();
            }
            if let Some(r) = rasters {
                cfg.rasters = r.into();
            }
            if let Some(j) = jobs {
                cfg.jobs = j;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let summary = run_pipeline(&cfg, &progress)?;
            let avg = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.2}"));
            progress(&format!(
                "{} pairs, {} proposals, mIoU {}, mF1 {}",
                summary.n_pairs,
                summary.n_proposals,
                avg(summary.report.miou),
                avg(summary.report.mf1)
            ));
        }
    }
    Ok(())
}

fn load_config(path: Option<PathBuf>) -> Result<PipelineConfig> {
    Ok(path.map(PipelineConfig::load).transpose()?.unwrap_or_default())
}

fn alpha_grid(from: f64, to: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !(from <= to) {
        return Err(Error::Config { field: "step".into(), detail: format!("cannot step {step} from {from} to {to}") });
    }
    let n = ((to - from) / step + 1e-9).floor() as usize;
    // rounding keeps grid points such as 0.3 exact in the report
    Ok((0..=n).map(|i| ((from + i as f64 * step) * 1e9).round() / 1e9).collect())
}

fn write_proposals(dir: &Path, id: &str, ps: &[ChangeProposal], h: usize, w: usize) -> Result<()> {
    let set = MaskSet::new(h, w, ps.iter().map(|p| p.mask.clone()).collect())?;
    let scores: Vec<f64> = ps.iter().map(|p| p.change_score).collect();
    write_mask_file(dir.join(format!("{id}.proposals.json")), &set, Some(&scores))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
