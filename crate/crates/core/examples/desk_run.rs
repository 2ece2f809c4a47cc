//! Generates a synthetic two-domain corpus, trains step 0 and a CDL schedule,
//! and prints target-domain AUC, uncertainty mass and the uncertainty/error
//! correlation after every CDL step.
//!
//! ```text
//! cargo run --release -p cdl-core --example desk_run -- [seed] [k] [lambda3] [labeled_only]
//! ```

use std::time::Instant;

use cdl::datamodel::Role;
use cdl::evalkit::{evaluate, mass_in_range, uncertainty_error_correlation};
use cdl::featstore::{CorpusManifest, FeatureStore};
use cdl::synthgen::{generate, SynthSpec};
use cdl::trainer::{train_cdl, train_step0, LoadedCorpus, LogRecord, TrainLog, TrainOptions};
use cdl::TrainConfig;

fn arg<T: std::str::FromStr>(i: usize, default: T) -> T {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn env_f(name: &str, default: f64) -> f64 {
    std::env::var(name).ok().and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn env_u(name: &str, default: usize) -> usize {
    std::env::var(name).ok().and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> cdl::Result<()> {
    let seed: u64 = arg(1, 0);
    let k: usize = arg(2, 4);
    let lambda3: f64 = arg(3, 1e-3);
    let labeled_only: bool = arg(4, false);

    let mut spec = SynthSpec::two_domain(seed, 200, 200, 100);
    spec.domain_shift = env_f("SHIFT", spec.domain_shift);
    spec.anomaly_magnitude = env_f("AMAG", spec.anomaly_magnitude);
    spec.domain_anomaly_magnitude = env_f("DMAG", spec.domain_anomaly_magnitude);
    spec.noise = env_f("NOISE", spec.noise);
    spec.rho = env_f("RHO", spec.rho);
    spec.aux_domain_coupling = env_f("COUPLE", spec.aux_domain_coupling);
    let dir = tempfile::tempdir().expect("tempdir");
    let report = generate(&spec, dir.path())?;
    let store = FeatureStore::new();
    let cfg = TrainConfig {
        n_s: env_u("NS", 16),
        batch_size: env_u("B", 16),
        epochs_step0: env_u("E0", 20),
        cdl_steps: k,
        epochs_per_step: env_u("EPS", 2),
        lambda1: env_f("L1", 5e-3),
        lambda2: env_f("L2", 1e-3),
        lambda3,
        lambda4: env_f("L4", 700.0),
        lr_encoder: env_f("LRE", 1e-4),
        lr_fc: env_f("LRF", 1e-4),
        seed,
        ..TrainConfig::default()
    };
    let load = |name: &str, role, streams: &[&str]| {
        let m = CorpusManifest::load(&report.manifests[name], role)?;
        LoadedCorpus::load(m, &store, streams, cfg.n_s)
    };
    let labeled = load("labeled", Role::Labeled, &["main", "aux"])?;
    let external = load("external", Role::External, &["main", "aux"])?;
    let test = load("test", Role::Test, &["main", "aux"])?;
    let aux_cfg = TrainConfig {
        main_stream: cfg.aux_stream.clone(),
        ..cfg.clone()
    };

    let t0 = Instant::now();
    let mut log = TrainLog::in_memory();
    let s0 = train_step0(&labeled, &cfg, &mut log, &TrainOptions::default())?;
    let base = evaluate(&s0.heads.main, &test, &cfg, "step0", 1)?;
    let src = evaluate(&s0.heads.main, &labeled, &cfg, "step0", 1)?;
    let aux = evaluate(&s0.heads.aux, &test, &aux_cfg, "step0", 1)?;
    println!(
        "seed {seed} step0 {:.1}s target auc {:.4} ap {:.4} | source auc {:.4} | aux target auc {:.4}",
        t0.elapsed().as_secs_f64(),
        base.auc,
        base.ap,
        src.auc,
        aux.auc
    );
    let mut opts = TrainOptions {
        labeled_only,
        on_step_end: Some(Box::new(|s| {
            let r = evaluate(&s.heads.main, &test, &s.config, "x", 1)?;
            let ra = evaluate(&s.heads.aux, &test, &aux_cfg, "x", 1)?;
            let c = uncertainty_error_correlation(s, &external, 1)?;
            println!(
                "  step {} auc {:.4} ap {:.4} aux {:.4} rho {:.3} t {:.0}s",
                s.cdl_step,
                r.auc,
                r.ap,
                ra.auc,
                c.correlation.rho,
                t0.elapsed().as_secs_f64()
            );
            Ok(())
        })),
        ..Default::default()
    };
    let s = train_cdl(s0, &labeled, &external, &cfg, &mut log, &mut opts)?;
    drop(opts);
    for r in log.records() {
        if let LogRecord::Uncertainty { cdl_step, video_mean_s } = r {
            let v: Vec<f64> = video_mean_s.values().copied().collect();
            print!("S[0.9,1]@{cdl_step}={:.3} ", mass_in_range(&v, 0.9, 1.0));
        }
    }
    println!();
    let fin = evaluate(&s.heads.main, &test, &cfg, "final", 1)?;
    println!("final auc {:.4} delta {:+.4}", fin.auc, fin.auc - base.auc);
    Ok(())
}
