//! Acceptance gate. Each test prints one `PASS`/`FAIL` line for its
//! criterion and then asserts it.
//!
//! Criteria 6 and 7 train on a desk-scale synthetic corpus and take several
//! minutes; everything else finishes in seconds.

use std::collections::BTreeMap;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use ndarray::{array, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cdl::autodiff::{Mat, Tape, Var};
use cdl::datamodel::{HeadId, HeadOutput, Role};
use cdl::evalkit::{
    average_precision, evaluate, frame_segment_index, mass_in_range, roc_auc, segment_to_frame, spearman,
    uncertainty_error_correlation, MetricsReport,
};
use cdl::featstore::{pool_segments, CorpusManifest, FeatureBlob, FeatureStore};
use cdl::losses::{
    bce_loss, bce_loss_tape, external_loss, external_loss_tape, probability_variance, ranking_loss,
    ranking_loss_tape, surrogate_variance, total_loss, total_loss_tape, ExternalVideo, ExternalVideoVars,
};
use cdl::nethead::{gradient, positional_encoding, HeadParameters, HeadVars};
use cdl::synthgen::{generate, ClassSpec, SynthSpec};
use cdl::trainer::{
    adam_step, compose_batch, train_cdl, train_step0, LoadedCorpus, LogRecord, Phase, TrainLog, TrainOptions,
    TrainState,
};
use cdl::TrainConfig;

fn verdict(id: u32, name: &str, ok: bool, detail: &str, elapsed: Duration) {
    println!(
        "{} criterion {id} ({name}): {detail} [{:.1}s]",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
}

fn workers() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

// ---------------------------------------------------------------- criterion 1

fn close(got: f64, want: f64, tol: f64, what: &str, failures: &mut Vec<String>) {
    if !((got - want).abs() <= tol) {
        failures.push(format!("{what}: got {got}, want {want} (tol {tol:e})"));
    }
}

#[test]
fn criterion_1_loss_oracles() {
    let t0 = Instant::now();
    let mut f = Vec::new();
    let ln2 = 2f64.ln();

    let r = ranking_loss(&[0.5, 0.5], &[0.0, 0.0], 0.0, 1.0).unwrap();
    close(r.hinge, 0.5, 1e-9, "rank hinge", &mut f);
    close(r.sparsity, 1.0, 1e-9, "rank sparsity", &mut f);
    close(r.rank, 1.5, 1e-9, "rank total", &mut f);

    let b = bce_loss(&[0.5, 0.5], &[0.5, 1.0]).unwrap();
    close(b[0], ln2, 1e-6, "bce p=0.5 y=0.5", &mut f);
    close(b[1], ln2, 1e-6, "bce p=0.5 y=1", &mut f);

    let tau = 1.25;
    let orth = surrogate_variance(&array![[1.0, 0.0]], &array![[0.0, 2.0]], tau).unwrap();
    close(orth.values()[0], 0.286505, 1e-6, "S orthogonal", &mut f);
    let anti = surrogate_variance(&array![[1.0, -2.0]], &array![[-3.0, 6.0]], tau).unwrap();
    close(anti.values()[0], 0.082085, 1e-6, "S antiparallel", &mut f);

    close(probability_variance(&[0.8], &[0.6]).unwrap(), 0.04, 1e-9, "pvar single", &mut f);
    close(probability_variance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0, 1e-9, "pvar swap", &mut f);

    let z = array![[1.0, 2.0, 0.5], [0.3, 0.0, 1.0]];
    let same = external_loss(
        &[ExternalVideo {
            uncertainty: &[1.0, 1.0],
            bce: &[0.0, 0.0],
            z_main: &z,
            z_aux: &z,
        }],
        1e-3,
    )
    .unwrap();
    close(same.ext, -1e-3, 1e-9, "ext identical Z", &mut f);
    let single = external_loss(
        &[ExternalVideo {
            uncertainty: &[0.5],
            bce: &[0.4],
            z_main: &array![[1.0, 0.0]],
            z_aux: &array![[0.0, 1.0]],
        }],
        1e-3,
    )
    .unwrap();
    close(single.ext, 0.2, 1e-9, "ext single segment", &mut f);
    close(total_loss(1.0, 0.5, 700.0), 351.0, 1e-9, "total", &mut f);

    let pooled = pool_segments(&FeatureBlob::new(array![[0.0f32], [1.0]]), 3).unwrap();
    for (j, want) in [0.0, 0.5, 1.0].into_iter().enumerate() {
        close(pooled[[j, 0]], want, 1e-9, "pool T=2 n_s=3", &mut f);
    }
    for d in [2, 8, 64] {
        close(positional_encoding(2, d).unwrap()[[1, 0]], 0.841471, 1e-6, "PE[1,0]", &mut f);
    }

    // Adam, first step from fresh moments: -lr * g / (|g| + eps) after bias correction.
    let mut p = array![[0.0]];
    let (mut m, mut v) = (array![[0.0]], array![[0.0]]);
    adam_step(&mut p, &array![[1.0]], &mut m, &mut v, 1, 0.1, 0.0).unwrap();
    close(p[[0, 0]], -0.1, 1e-6, "adam first step", &mut f);

    // B = 64 batch composition.
    let abn: Vec<usize> = (0..40).collect();
    let norm: Vec<usize> = (40..80).collect();
    let batch = compose_batch(&abn, &norm, 100, 64, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    close(batch.pairs.len() as f64, 16.0, 0.0, "B=64 pairs", &mut f);
    close(batch.external.len() as f64, 32.0, 0.0, "B=64 external", &mut f);

    // n_f = 130, n_s = 64: 63 segments of 2 frames, the last covers 4.
    let idx = frame_segment_index(130, 64).unwrap();
    let mut counts = vec![0usize; 64];
    idx.iter().for_each(|&s| counts[s] += 1);
    if counts[..63].iter().any(|&c| c != 2) || counts[63] != 4 {
        f.push(format!("n_f=130 segment spans {counts:?}"));
    }
    let seg: Vec<f64> = (0..64).map(f64::from).collect();
    let frames = segment_to_frame(&seg, 128).unwrap();
    if (0..128).any(|i| frames[i] != seg[i / 2]) {
        f.push("n_f=128 repeats".into());
    }

    close(roc_auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75, 1e-9, "auc", &mut f);
    close(average_precision(&[0.9, 0.2], &[0, 1]).unwrap(), 0.5, 1e-9, "ap", &mut f);
    let (u, w) = ([1.0, 2.0, 2.0, 3.0], [4.0, 3.0, 3.0, 1.0]);
    close(spearman(&u, &w).unwrap(), rank_pearson_oracle(&u, &w), 1e-9, "spearman ties", &mut f);

    // Output-bias gradient of sum(scores) equals the sum of sigmoid slopes.
    let head = HeadParameters::init(8, 11).unwrap();
    let x = random_mat(&mut ChaCha8Rng::seed_from_u64(12), 4, 8);
    let (_, g) = gradient(&[&head], |tape, vars: &[HeadVars]| {
        let out = vars[0].forward(tape, &[&x], true)?;
        Ok(tape.sum(out[0].scores))
    })
    .unwrap();
    let scores = head.forward(&x, true).unwrap().scores;
    let want: f64 = scores.iter().map(|s| s * (1.0 - s)).sum();
    let bias = g[0].tensors().last().unwrap()[[0, 0]];
    close(bias, want, 1e-9, "output bias gradient", &mut f);

    let elapsed = t0.elapsed();
    let ok = f.is_empty() && elapsed < Duration::from_secs(1);
    verdict(1, "loss oracles", ok, &format!("{} mismatches {:?}", f.len(), f), elapsed);
    assert!(ok);
}

// ---------------------------------------------------------------- criterion 2

fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum LossKind {
    Rank,
    Bce,
    Ext,
    Total,
}

struct Instance {
    abn: [Mat; 2],
    norm: [Mat; 2],
    ext: [Mat; 2],
    targets: [Vec<f64>; 2],
    /// Uncertainty weights from the unperturbed heads, held fixed.
    s: Vec<f64>,
    lambda3: f64,
}

const L1: f64 = 5e-3;
const L2: f64 = 1e-3;
const L4: f64 = 700.0;
const TAU: f64 = 1.25;

/// Forward outputs of one head on the instance's three videos.
struct Outs {
    abn: HeadOutput,
    norm: HeadOutput,
    ext: HeadOutput,
}

fn outs(head: &HeadParameters, h: usize, inst: &Instance) -> Outs {
    let fwd = |x: &Mat| head.forward(x, true).unwrap();
    Outs {
        abn: fwd(&inst.abn[h]),
        norm: fwd(&inst.norm[h]),
        ext: fwd(&inst.ext[h]),
    }
}

fn plain_loss(kind: LossKind, o: [&Outs; 2], inst: &Instance) -> f64 {
    let rank = |h: usize| ranking_loss(&o[h].abn.scores, &o[h].norm.scores, L1, L2).unwrap().rank;
    let ext = || {
        let bm = bce_loss(&o[0].ext.scores, &inst.targets[0]).unwrap();
        let ba = bce_loss(&o[1].ext.scores, &inst.targets[1]).unwrap();
        let bce: Vec<f64> = bm.iter().zip(&ba).map(|(a, b)| a + b).collect();
        external_loss(
            &[ExternalVideo {
                uncertainty: &inst.s,
                bce: &bce,
                z_main: &o[0].ext.penultimate,
                z_aux: &o[1].ext.penultimate,
            }],
            inst.lambda3,
        )
        .unwrap()
        .ext
    };
    match kind {
        LossKind::Rank => rank(0),
        LossKind::Bce => {
            let b = bce_loss(&o[0].ext.scores, &inst.targets[0]).unwrap();
            b.iter().sum::<f64>() / b.len() as f64
        }
        LossKind::Ext => ext(),
        LossKind::Total => total_loss(rank(0) + rank(1), ext(), L4),
    }
}

fn tape_loss(kind: LossKind, tape: &mut Tape, vars: &[HeadVars], inst: &Instance) -> cdl::Result<Var> {
    let om = vars[0].forward(tape, &[&inst.abn[0], &inst.norm[0], &inst.ext[0]], true)?;
    let oa = vars[1].forward(tape, &[&inst.abn[1], &inst.norm[1], &inst.ext[1]], true)?;
    let rank_m = ranking_loss_tape(tape, om[0].scores, om[1].scores, L1, L2)?.rank;
    let rank_a = ranking_loss_tape(tape, oa[0].scores, oa[1].scores, L1, L2)?.rank;
    let bm = bce_loss_tape(tape, om[2].scores, &inst.targets[0])?;
    if kind == LossKind::Bce {
        return Ok(tape.mean(bm));
    }
    if kind == LossKind::Rank {
        return Ok(rank_m);
    }
    let ba = bce_loss_tape(tape, oa[2].scores, &inst.targets[1])?;
    let bce = tape.add(bm, ba);
    let ext = external_loss_tape(
        tape,
        &[ExternalVideoVars {
            uncertainty: &inst.s,
            bce,
            z_main: om[2].penultimate,
            z_aux: oa[2].penultimate,
        }],
        inst.lambda3,
    )?
    .ext;
    if kind == LossKind::Ext {
        return Ok(ext);
    }
    let rank = tape.add(rank_m, rank_a);
    Ok(total_loss_tape(tape, rank, ext, L4))
}

/// Loss with one parameter coordinate shifted by `offset`; only the
/// perturbed head is re-run.
fn shifted_loss(
    kind: LossKind,
    probe: &mut [HeadParameters; 2],
    fixed: &[Outs; 2],
    inst: &Instance,
    (hi, ti, pos): (usize, usize, (usize, usize)),
    offset: f64,
) -> f64 {
    let orig = probe[hi].tensors()[ti][pos];
    probe[hi].tensors_mut()[ti][pos] = orig + offset;
    let moved = outs(&probe[hi], hi, inst);
    probe[hi].tensors_mut()[ti][pos] = orig;
    let o = if hi == 0 { [&moved, &fixed[1]] } else { [&fixed[0], &moved] };
    plain_loss(kind, o, inst)
}

/// Relative error with an absolute floor for near-zero gradients.
fn rel_err(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < 1e-6 {
        (a - n).abs()
    } else {
        (a - n).abs() / scale
    }
}

#[test]
fn criterion_2_gradient_suite() {
    let t0 = Instant::now();
    let (n_s, d, h) = (4, 8, 1e-4);
    let coords_per_head = 6;
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let (mut checked, mut skipped) = (0usize, 0usize);
    let kinds = [
        (LossKind::Rank, "rank"),
        (LossKind::Bce, "bce"),
        (LossKind::Ext, "ext"),
        (LossKind::Total, "total"),
    ];
    for (ki, (kind, name)) in kinds.into_iter().enumerate() {
        for i in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 * ki as u64 + i);
            let main = HeadParameters::init(d, rng.random()).unwrap();
            let aux = HeadParameters::init(d, rng.random()).unwrap();
            let m = |rng: &mut ChaCha8Rng| [random_mat(rng, n_s, d), random_mat(rng, n_s, d)];
            let (abn, norm, ext) = (m(&mut rng), m(&mut rng), m(&mut rng));
            let targets = [
                (0..n_s).map(|_| rng.random_range(0.0..1.0)).collect(),
                (0..n_s).map(|_| rng.random_range(0.0..1.0)).collect(),
            ];
            let mut inst = Instance {
                abn,
                norm,
                ext,
                targets,
                s: Vec::new(),
                lambda3: 10f64.powf(rng.random_range(-3.0..0.0)),
            };
            let fixed = [outs(&main, 0, &inst), outs(&aux, 1, &inst)];
            inst.s = surrogate_variance(&fixed[0].ext.penultimate, &fixed[1].ext.penultimate, TAU).unwrap().0;
            let (value, grads) = gradient(&[&main, &aux], |tape, vars| tape_loss(kind, tape, vars, &inst)).unwrap();
            let plain = plain_loss(kind, [&fixed[0], &fixed[1]], &inst);
            assert!((value - plain).abs() <= 1e-9 * plain.abs().max(1.0), "{name}: tape {value} vs plain {plain}");

            let heads_used = if matches!(kind, LossKind::Rank | LossKind::Bce) { 1 } else { 2 };
            let mut probe = [main.clone(), aux.clone()];
            for hi in 0..heads_used {
                let n_tensors = probe[hi].tensors().len();
                for c in 0..coords_per_head {
                    let ti = (i as usize * coords_per_head + c) % n_tensors;
                    let shape = probe[hi].tensors()[ti].dim();
                    let coord = (hi, ti, (rng.random_range(0..shape.0), rng.random_range(0..shape.1)));
                    let analytic = grads[hi].tensors()[ti][coord.2];
                    let mut at = |x: f64| shifted_loss(kind, &mut probe, &fixed, &inst, coord, x);
                    let (up, down) = (at(h), at(-h));
                    let numeric = (up - down) / (2.0 * h);
                    let e = rel_err(analytic, numeric);
                    if e >= 1e-3 {
                        // The quotient at h is only an oracle where it has
                        // converged (halving h barely moves it) and no ReLU or
                        // max kink sits inside the stencil (second differences
                        // shrink like h^2, not like h). Neither test looks at
                        // the analytic value.
                        let (up2, down2) = (at(h / 2.0), at(-h / 2.0));
                        let half = (up2 - down2) / h;
                        let second = up - 2.0 * plain + down;
                        let second_half = up2 - 2.0 * plain + down2;
                        let scale = analytic.abs().max(numeric.abs()).max(1e-6);
                        let jump = (second - 4.0 * second_half).abs() / h;
                        if rel_err(numeric, half) > 1e-4 || jump > 1e-4 * scale {
                            skipped += 1;
                            continue;
                        }
                    }
                    let w = worst.entry(name).or_insert(0.0);
                    *w = w.max(e);
                    checked += 1;
                }
            }
        }
    }
    let elapsed = t0.elapsed();
    let max_err = worst.values().cloned().fold(0.0, f64::max);
    let ok = max_err < 1e-3 && skipped * 10 <= checked + skipped && elapsed < Duration::from_secs(60);
    let worst: Vec<String> = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect();
    verdict(
        2,
        "gradient suite",
        ok,
        &format!(
            "80 instances (n_s 4, D 8, h 1e-4), {checked} coordinates checked, {skipped} skipped where the h = 1e-4 quotient is unresolved or straddles a kink; \
             worst relative error {}",
            worst.join(", ")
        ),
        elapsed,
    );
    assert!(ok);
}

// ---------------------------------------------------------------- criterion 3

fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

/// Sweeps every distinct score as a threshold (predict positive when
/// `score >= t`) from high to low and sums precision times recall increments.
fn threshold_sweep_ap(scores: &[f64], labels: &[u8]) -> f64 {
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let positives = labels.iter().filter(|&&l| l == 1).count() as f64;
    let (mut ap, mut prev_recall) = (0.0, 0.0);
    for t in thresholds {
        let (mut tp, mut pp) = (0.0, 0.0);
        for (s, &l) in scores.iter().zip(labels) {
            if *s >= t {
                pp += 1.0;
                tp += f64::from(l);
            }
        }
        let recall = tp / positives;
        ap += (recall - prev_recall) * (tp / pp);
        prev_recall = recall;
    }
    ap
}

fn rank_pearson_oracle(u: &[f64], v: &[f64]) -> f64 {
    let ranks = |x: &[f64]| -> Vec<f64> {
        x.iter()
            .map(|&a| {
                let below = x.iter().filter(|&&b| b < a).count() as f64;
                let equal = x.iter().filter(|&&b| b == a).count() as f64;
                below + (equal + 1.0) / 2.0
            })
            .collect()
    };
    let (ru, rv) = (ranks(u), ranks(v));
    let n = u.len() as f64;
    let (mu, mv) = (ru.iter().sum::<f64>() / n, rv.iter().sum::<f64>() / n);
    let cov: f64 = ru.iter().zip(&rv).map(|(a, b)| (a - mu) * (b - mv)).sum();
    let su: f64 = ru.iter().map(|a| (a - mu).powi(2)).sum::<f64>().sqrt();
    let sv: f64 = rv.iter().map(|b| (b - mv).powi(2)).sum::<f64>().sqrt();
    cov / (su * sv)
}

#[test]
fn criterion_3_metric_oracles() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut auc_err, mut ap_err, mut rho_err) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..200 {
        let n = rng.random_range(2..=50);
        // Coarse score grid so ties are common.
        let levels = rng.random_range(2..=12);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..=1)).collect();
        labels[0] = 1;
        labels[1] = 0;
        auc_err = auc_err.max((roc_auc(&scores, &labels).unwrap() - pairwise_auc(&scores, &labels)).abs());
        ap_err = ap_err.max((average_precision(&scores, &labels).unwrap() - threshold_sweep_ap(&scores, &labels)).abs());

        let other: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64).collect();
        if let Ok(rho) = spearman(&scores, &other) {
            rho_err = rho_err.max((rho - rank_pearson_oracle(&scores, &other)).abs());
        }
    }
    let elapsed = t0.elapsed();
    let ok = auc_err <= 1e-9 && ap_err <= 1e-9 && rho_err <= 1e-9 && elapsed < Duration::from_secs(10);
    verdict(
        3,
        "metric oracles",
        ok,
        &format!("200 instances, max |err| auc {auc_err:.1e} ap {ap_err:.1e} spearman {rho_err:.1e}"),
        elapsed,
    );
    assert!(ok);
}

// ---------------------------------------------------------------- criterion 4

#[test]
fn criterion_4_surrogate_variance_surface() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut err, mut bound_violations, mut scale_err) = (0.0f64, 0usize, 0.0f64);
    for _ in 0..1000 {
        let tau = rng.random_range(0.1..5.0);
        let a = random_mat(&mut rng, 1, 32);
        let b = random_mat(&mut rng, 1, 32);
        let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        let want = (tau * (dot / (na * nb) - 1.0)).exp();
        let s = surrogate_variance(&a, &b, tau).unwrap().0[0];
        err = err.max((s - want).abs());
        if !(s >= (-2.0 * tau).exp() && s <= 1.0) {
            bound_violations += 1;
        }
        let c = rng.random_range(1e-3..1e3);
        let scaled = surrogate_variance(&(&a * c), &b, tau).unwrap().0[0];
        scale_err = scale_err.max((scaled - s).abs());
    }
    let elapsed = t0.elapsed();
    let ok = err <= 1e-9 && bound_violations == 0 && scale_err <= 1e-9;
    verdict(
        4,
        "surrogate variance",
        ok,
        &format!(
            "1000 pairs, max |S - exp(tau(cos-1))| {err:.1e}, bound violations {bound_violations}, scale drift {scale_err:.1e}"
        ),
        elapsed,
    );
    assert!(ok);
}

// ---------------------------------------------------------------- criterion 5

fn small_spec(seed: u64, n: usize) -> SynthSpec {
    let mut spec = SynthSpec::two_domain(seed, n, n, n);
    spec.frames = [40, 80];
    spec.classes = vec![ClassSpec {
        name: "burst".into(),
        window: [8, 16],
    }];
    spec.main_dim = 8;
    spec.aux_dim = 8;
    spec.clip_len = 4;
    spec
}

struct Corpora {
    _dir: tempfile::TempDir,
    report: cdl::synthgen::SynthReport,
    labeled: LoadedCorpus,
    external: LoadedCorpus,
    test: LoadedCorpus,
}

fn materialize(spec: &SynthSpec, n_s: usize, test_streams: &[&str]) -> Corpora {
    let dir = tempfile::tempdir().unwrap();
    let report = generate(spec, dir.path()).unwrap();
    let store = FeatureStore::new();
    let load = |name: &str, role, streams: &[&str]| {
        let m = CorpusManifest::load(&report.manifests[name], role).unwrap();
        LoadedCorpus::load(m, &store, streams, n_s).unwrap()
    };
    Corpora {
        labeled: load("labeled", Role::Labeled, &["main", "aux"]),
        external: load("external", Role::External, &["main", "aux"]),
        test: load("test", Role::Test, test_streams),
        report,
        _dir: dir,
    }
}

fn boundary_trajectory(c: &Corpora, cfg: &TrainConfig, labeled_only: bool) -> (Vec<TrainState>, TrainLog) {
    let mut log = TrainLog::in_memory();
    let s0 = train_step0(&c.labeled, cfg, &mut log, &TrainOptions::default()).unwrap();
    let mut seen = vec![s0.clone()];
    {
        let mut opts = TrainOptions {
            labeled_only,
            on_step_end: Some(Box::new(|s: &TrainState| {
                seen.push(s.clone());
                Ok(())
            })),
            ..Default::default()
        };
        train_cdl(s0, &c.labeled, &c.external, cfg, &mut log, &mut opts).unwrap();
    }
    (seen, log)
}

#[test]
fn criterion_5_schedule_fidelity() {
    let t0 = Instant::now();
    let c = materialize(&small_spec(5, 8), 4, &["main"]);
    let cfg = TrainConfig {
        n_s: 4,
        batch_size: 4,
        epochs_step0: 2,
        cdl_steps: 3,
        epochs_per_step: 4,
        seed: 5,
        ..TrainConfig::default()
    };
    let (_, log) = boundary_trajectory(&c, &cfg, false);
    let generations: Vec<usize> = log
        .records()
        .iter()
        .filter_map(|r| match r {
            LogRecord::PseudoLabels { cdl_step, .. } => Some(*cdl_step),
            _ => None,
        })
        .collect();
    let union_epochs = log
        .records()
        .iter()
        .filter(|r| matches!(r, LogRecord::EpochEnd { phase: Phase::Cdl, .. }))
        .count();
    let step0_epochs = log
        .records()
        .iter()
        .filter(|r| matches!(r, LogRecord::EpochEnd { phase: Phase::Step0, .. }))
        .count();

    let silent = TrainConfig { lambda4: 0.0, ..cfg.clone() };
    let (with_zero, _) = boundary_trajectory(&c, &silent, false);
    let (labeled_only, _) = boundary_trajectory(&c, &silent, true);
    // The two runs batch different numbers of rows through the same matrix
    // products, so sums may round differently; nothing else may differ.
    let drift = with_zero
        .iter()
        .zip(&labeled_only)
        .flat_map(|(a, b)| {
            let pairs = a.heads.main.tensors().iter().zip(b.heads.main.tensors());
            pairs.chain(a.heads.aux.tensors().iter().zip(b.heads.aux.tensors()))
        })
        .flat_map(|(x, y)| x.iter().zip(y.iter()).map(|(p, q)| (p - q).abs()).collect::<Vec<_>>())
        .fold(0.0f64, f64::max);
    let same_heads = with_zero.len() == labeled_only.len() && drift <= 1e-12;

    let elapsed = t0.elapsed();
    let ok = generations == [0, 1, 2, 3] && union_epochs == 12 && step0_epochs == 4 && same_heads;
    verdict(
        5,
        "schedule fidelity",
        ok,
        &format!(
            "generations at steps {generations:?}, union epochs {union_epochs}, step-0 epochs (2 per head) {step0_epochs}, \
             lambda4=0 vs labeled-only max parameter drift over {} boundaries {drift:.1e}",
            with_zero.len()
        ),
        elapsed,
    );
    assert!(ok);
}

// ------------------------------------------------------------ criteria 6 and 7

/// Desk-scale schedule shared by the end-to-end criteria.
fn desk_config(seed: u64, lambda3: f64) -> TrainConfig {
    TrainConfig {
        n_s: 8,
        batch_size: 16,
        epochs_step0: 15,
        cdl_steps: 4,
        epochs_per_step: 2,
        lambda1: 5e-3,
        lambda2: 1e-3,
        lambda3,
        lambda4: 700.0,
        lr_encoder: 1e-3,
        lr_fc: 1e-3,
        seed,
        ..TrainConfig::default()
    }
}

struct DeskRun {
    baseline_auc: f64,
    final_auc: f64,
    /// Spearman(S, BCE vs ground truth) after CDL steps 1..=k.
    correlations: Vec<f64>,
    /// Fraction of per-video mean S in [0.9, 1] at generations 0..=k.
    high_s_mass: Vec<f64>,
}

fn desk_run(seed: u64, lambda3: f64) -> DeskRun {
    let cfg = desk_config(seed, lambda3);
    let c = materialize(&SynthSpec::two_domain(seed, 200, 200, 100), cfg.n_s, &["main"]);
    let w = workers();
    let mut log = TrainLog::in_memory();
    let s0 = train_step0(
        &c.labeled,
        &cfg,
        &mut log,
        &TrainOptions {
            workers: w,
            ..Default::default()
        },
    )
    .unwrap();
    // The k = 0 run ends here: its model is exactly the step-0 state.
    let baseline_auc = evaluate(&s0.heads.main, &c.test, &cfg, "k0", w).unwrap().auc;
    let mut correlations = Vec::new();
    let state = {
        let mut opts = TrainOptions {
            workers: w,
            on_step_end: Some(Box::new(|s: &TrainState| {
                correlations.push(uncertainty_error_correlation(s, &c.external, w)?.correlation.rho);
                Ok(())
            })),
            ..Default::default()
        };
        train_cdl(s0, &c.labeled, &c.external, &cfg, &mut log, &mut opts).unwrap()
    };
    let final_auc = evaluate(&state.heads.main, &c.test, &cfg, "final", w).unwrap().auc;
    let high_s_mass = log
        .records()
        .iter()
        .filter_map(|r| match r {
            LogRecord::Uncertainty { video_mean_s, .. } => {
                let v: Vec<f64> = video_mean_s.values().copied().collect();
                Some(mass_in_range(&v, 0.9, 1.0))
            }
            _ => None,
        })
        .collect();
    DeskRun {
        baseline_auc,
        final_auc,
        correlations,
        high_s_mass,
    }
}

fn seed0_run() -> &'static DeskRun {
    static RUN: OnceLock<DeskRun> = OnceLock::new();
    RUN.get_or_init(|| desk_run(0, 1e-3))
}

#[test]
fn criterion_6_cdl_benefit() {
    let t0 = Instant::now();
    let mut deltas = Vec::new();
    let mut lines = Vec::new();
    for seed in 0..5u64 {
        let (base, fin) = if seed == 0 {
            let r = seed0_run();
            (r.baseline_auc, r.final_auc)
        } else {
            let r = desk_run(seed, 1e-3);
            (r.baseline_auc, r.final_auc)
        };
        deltas.push(fin - base);
        lines.push(format!("seed {seed}: k=0 {base:.4} -> CDL {fin:.4} ({:+.4})", fin - base));
    }
    let wins = deltas.iter().filter(|&&d| d > 0.0).count();
    let mean = deltas.iter().sum::<f64>() / deltas.len() as f64;
    let elapsed = t0.elapsed();
    let ok = wins >= 4 && mean >= 0.02 && elapsed < Duration::from_secs(30 * 60);
    for l in &lines {
        println!("    {l}");
    }
    verdict(
        6,
        "CDL benefit",
        ok,
        &format!("CDL beats k=0 in {wins}/5 seeds, mean delta {mean:+.4} (need >= 4/5 and >= +0.02)"),
        elapsed,
    );
    assert!(ok);
}

#[test]
fn criterion_7_uncertainty_diagnostics() {
    let t0 = Instant::now();
    let with = seed0_run();
    let without = desk_run(0, 0.0);
    let k = with.correlations.len();
    let negative = with.correlations.iter().all(|&r| r <= -0.2);
    let higher = with
        .correlations
        .iter()
        .zip(&without.correlations)
        .all(|(&a, &b)| b > a);
    let (step1, last) = (with.high_s_mass[1], with.high_s_mass[k]);
    let grows = last > step1;
    let elapsed = t0.elapsed();
    let ok = negative && higher && grows;
    verdict(
        7,
        "uncertainty diagnostics",
        ok,
        &format!(
            "rho(lambda3=1e-3) {:?}, rho(lambda3=0) {:?}; S in [0.9,1] mass step 1 {step1:.3} -> step {k} {last:.3}",
            fmt_vec(&with.correlations),
            fmt_vec(&without.correlations)
        ),
        elapsed,
    );
    assert!(ok);
}

fn fmt_vec(v: &[f64]) -> Vec<String> {
    v.iter().map(|x| format!("{x:.3}")).collect()
}

// ---------------------------------------------------------------- criterion 8

#[test]
fn criterion_8_inference_contract() {
    let t0 = Instant::now();
    let spec = small_spec(8, 6);
    let dir = tempfile::tempdir().unwrap();
    let report = generate(&spec, dir.path()).unwrap();
    let cfg = TrainConfig {
        n_s: 4,
        ..TrainConfig::default()
    };
    let store = FeatureStore::new();
    let manifest = CorpusManifest::load(&report.manifests["test"], Role::Test).unwrap();
    let test = LoadedCorpus::load(manifest, &store, &[&cfg.main_stream], cfg.n_s).unwrap();
    let mut pair = cdl::nethead::HeadPair::init(8, 8, 1).unwrap();
    let reference = evaluate(pair.get(HeadId::Main), &test, &cfg, "ckpt", 1).unwrap();

    // The auxiliary stream is never read, and evaluation takes the main head
    // only: a poisoned auxiliary head cannot reach it.
    let streams_ok = store.access_log().iter().all(|a| a.stream == cfg.main_stream && a.path.to_string_lossy().ends_with(".main.cdlf"));
    for t in pair.get_mut(HeadId::Aux).tensors_mut() {
        t.fill(f64::NAN);
    }
    let again = evaluate(pair.get(HeadId::Main), &test, &cfg, "ckpt", 1).unwrap();
    let heads_ok = again == reference;

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut bad = 0;
    let mut below = 0;
    for _ in 0..1000 {
        let n_s = rng.random_range(1..=128);
        let n_f = rng.random_range(1..=400);
        below += usize::from(n_f < n_s);
        let seg: Vec<f64> = (0..n_s).map(|_| rng.random()).collect();
        if segment_to_frame(&seg, n_f).map(|f| f.len()).ok() != Some(n_f) {
            bad += 1;
        }
    }
    let elapsed = t0.elapsed();
    let ok = streams_ok && heads_ok && bad == 0 && below > 0;
    verdict(
        8,
        "inference contract",
        ok,
        &format!(
            "{} blob reads all main-stream: {streams_ok}; aux-independent: {heads_ok}; frame-count mismatches {bad}/1000 ({below} with n_f < n_s)",
            store.access_log().len()
        ),
        elapsed,
    );
    assert!(ok);
}

// ---------------------------------------------------------------- criterion 9

fn pipeline(seed: u64) -> (String, MetricsReport) {
    let c = materialize(&small_spec(seed, 8), 4, &["main"]);
    let cfg = TrainConfig {
        n_s: 4,
        batch_size: 4,
        epochs_step0: 2,
        cdl_steps: 1,
        epochs_per_step: 1,
        seed,
        ..TrainConfig::default()
    };
    let mut log = TrainLog::in_memory();
    let s0 = train_step0(&c.labeled, &cfg, &mut log, &TrainOptions::default()).unwrap();
    let s = train_cdl(s0, &c.labeled, &c.external, &cfg, &mut log, &mut TrainOptions::default()).unwrap();
    let report = evaluate(&s.heads.main, &c.test, &cfg, "final", 1).unwrap();
    (c.report.corpus_hash.clone(), report)
}

#[test]
fn criterion_9_determinism() {
    let t0 = Instant::now();
    let (h1, r1) = pipeline(9);
    let (h2, r2) = pipeline(9);
    let same = h1 == h2 && r1 == r2;
    let elapsed = t0.elapsed();
    verdict(
        9,
        "determinism",
        same,
        &format!("corpus hash equal: {}, metrics reports equal: {} (auc {:.6})", h1 == h2, r1 == r2, r1.auc),
        elapsed,
    );
    assert!(same);
}
