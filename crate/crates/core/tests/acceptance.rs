//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on failure.

use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use needlesim::engine::{eval_spring, make_spring, EngineConfig, Event, NeedleSession, Phase};
use needlesim::evaluation::{compare, jnd_percent, steer, SteerConfig};
use needlesim::phantom::{generate, generate_bone_shell, layered_slab, layered_slab_volume, shift_structure};
use needlesim::phantom::{DegradeSpec, PhantomSpec};
use needlesim::planner::{plan, risk_mask, CandidatePath, PlannerConfig};
use needlesim::report::{quantiles, write_report, MetricRow, METRICS};
use needlesim::study::{run_case, Case, StudyConfig, TestArm};
use needlesim::tissue::{Classifier, HapticTable, LabelProvider, ProviderKind};
use needlesim::volume::{extract_body_mask, TissueLabel, TissueLabel::*};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn within(t: Duration, limit: Duration) -> bool {
    t < limit
}

fn spring_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let a0 = rng.random_range(0.0..3.0);
        let t_n = a0 + rng.random_range(0.0..10.0);
        let k = rng.random_range(1e-3..=5.0);
        let a1 = rng.random_range(0.0..=k);
        let s = make_spring(t_n, a0, k, a1).unwrap();
        let d = (t_n - a0) / k;
        worst = worst.max((eval_spring(&s, d) - t_n).abs());
    }
    let t = start.elapsed();
    outcome(
        worst <= 1e-9 && within(t, Duration::from_secs(1)),
        format!("max |f(d*) - T_N| = {worst:.2e} over 10000 tuples in {t:.2?}"),
    )
}

fn oracle_equivalence(case: &Case) -> Outcome {
    let start = Instant::now();
    let cfg = StudyConfig {
        test_arm: TestArm::Full,
        ..StudyConfig::default()
    };
    let run = run_case(case, &cfg).unwrap();
    let t = start.elapsed();
    let bad = run
        .metrics
        .iter()
        .filter(|m| !(m.metrics.rmse == 0.0 && m.metrics.mae == 0.0 && m.metrics.pct_identical == 100.0))
        .count();
    outcome(
        run.metrics.len() >= 500 && bad == 0 && within(t, Duration::from_secs(120)),
        format!("{} paths, {bad} with nonzero error, {t:.2?}", run.metrics.len()),
    )
}

const STEP: f64 = 0.09;
const VOXEL: f64 = 0.5;

/// Independent 1D force model of a monotone insertion through planar layers
/// with a1 = 0. Returns the force at every sample and the first depth at
/// which each tissue is under the tip.
fn slab_oracle(row: &[TissueLabel], x0: f64, n: usize) -> (Vec<f64>, Vec<(TissueLabel, f64)>) {
    let table = |l: TissueLabel| -> (f64, f64, f64) {
        match l {
            Air => (0.0, 0.0, 0.0),
            Skin => (0.7, 0.7, 0.8),
            FatSoft => (0.7, 0.7, 1.0),
            Fascia => (2.5, 1.0, 1.0),
            Liver => (0.3, 0.9, 1.2),
            other => panic!("no slab layer {other}"),
        }
    };
    // nearest voxel, ties to the lower index
    let at = |x: f64| row[((x / VOXEL) - 0.5).ceil() as usize];
    let mut cur = Air;
    let mut sustain = 0.0;
    let mut ramp: Option<(f64, f64, f64, f64)> = None; // anchor, a0, a2, T
    let mut forces = Vec::with_capacity(n);
    let mut contacts = Vec::new();
    let mut d = 0.0;
    for _ in 0..n {
        d += STEP;
        let t = at(x0 + d);
        let f = if t != cur {
            assert!(ramp.is_none(), "layer thinner than its ramp");
            contacts.push((t, d));
            let (tn, r, k) = table(t);
            cur = t;
            if tn <= sustain {
                sustain = r;
                r
            } else {
                ramp = Some((d, sustain, k * k / (tn - sustain), tn));
                sustain
            }
        } else if let Some((anchor, a0, a2, tn)) = ramp {
            let u = d - anchor;
            let f = a2 * u * u + a0;
            if f > tn {
                ramp = None;
                sustain = table(cur).1;
                sustain
            } else {
                f
            }
        } else {
            sustain
        };
        forces.push(f);
    }
    (forces, contacts)
}

fn boundary_shift() -> Outcome {
    let layers = [(Air, 10), (Skin, 4), (FatSoft, 16), (Fascia, 8), (FatSoft, 12), (Liver, 40)];
    let shift_vox = 3;
    let shift_mm = shift_vox as f64 * VOXEL;
    let (vol, body) = layered_slab_volume(&layers, VOXEL).unwrap();
    let test_labels = shift_structure(&vol.labels, &vol.geometry, Fascia, [shift_vox as i64, 0, 0], FatSoft);
    let row_ref: Vec<TissueLabel> = layers.iter().flat_map(|&(l, w)| std::iter::repeat_n(l, w)).collect();
    let row_test: Vec<TissueLabel> = (0..row_ref.len())
        .map(|x| test_labels[vol.geometry.index(x, 1, 1)])
        .collect();
    let vol = Arc::new(vol);
    let body = Arc::new(body);
    let reference = Arc::new(
        Classifier::new(vol.clone(), LabelProvider::full_segmentation(&vol), body.clone(), HapticTable::default())
            .unwrap(),
    );
    let test = Arc::new(
        Classifier::new(
            vol.clone(),
            LabelProvider {
                kind: ProviderKind::Full,
                labels: test_labels,
                transfer: None,
            },
            body,
            HapticTable::default(),
        )
        .unwrap(),
    );
    let cfg = SteerConfig {
        step: STEP,
        standoff: 0.0,
    };
    let mut worst_cross: f64 = 0.0;
    let mut worst_mae_gap: f64 = 0.0;
    let mut worst_trace: f64 = 0.0;
    let mut max_mae: f64 = 0.0;
    let mut paths = 0;
    for j in 0..25 {
        let x0 = j as f64 * STEP / 25.0 + 1e-4;
        let (y, z) = ((j % 3) as f64, ((j / 3) % 3) as f64);
        let p = CandidatePath::straight(Vector3::new(x0, y, z), Vector3::x(), 40.0);
        let r = steer(&p, reference.clone(), &EngineConfig::default(), &cfg).unwrap();
        let t = steer(&p, test.clone(), &EngineConfig::default(), &cfg).unwrap();
        let m = compare(&r, &t).unwrap();
        let n = r.samples.len();
        let (fr, cr) = slab_oracle(&row_ref, x0, n);
        let (ft, ct) = slab_oracle(&row_test, x0, n);
        for (s, f) in r.samples.iter().zip(&fr).chain(t.samples.iter().zip(&ft)) {
            worst_trace = worst_trace.max((s.force - f).abs());
        }
        let predicted = fr.iter().zip(&ft).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst_mae_gap = worst_mae_gap.max((predicted - m.mae).abs());
        max_mae = max_mae.max(m.mae);
        let fascia = |c: &[(TissueLabel, f64)]| c.iter().find(|e| e.0 == Fascia).map(|e| e.1).unwrap();
        let engine_cross = m.crossings.iter().find(|c| c.tissue == Fascia).map(|c| c.distance());
        let oracle_cross = fascia(&ct) - fascia(&cr);
        match engine_cross {
            Some(d) if (d - oracle_cross).abs() < 1e-9 => worst_cross = worst_cross.max((d - shift_mm).abs()),
            _ => worst_cross = f64::INFINITY,
        }
        paths += 1;
    }
    outcome(
        worst_cross <= STEP + 1e-9 && worst_mae_gap <= 1e-6 && worst_trace <= 1e-9 && max_mae <= 2.5,
        format!(
            "{paths} paths, fascia crossing off by <= {worst_cross:.3} mm from {shift_mm} mm, \
             MAE vs analytic <= {worst_mae_gap:.1e} N (max MAE {max_mae:.3} N)"
        ),
    )
}

fn desk_study(case: &Case) -> Outcome {
    let start = Instant::now();
    let run = run_case(case, &StudyConfig::default()).unwrap();
    let summary = needlesim::evaluation::aggregate(&run.metrics, &Default::default()).unwrap();
    let rows: Vec<MetricRow> = run.metrics.iter().map(MetricRow::from).collect();
    let dir = tempfile::tempdir().unwrap();
    let files = write_report(dir.path(), &rows).unwrap();
    let q = quantiles(&rows).unwrap();
    let t = start.elapsed();
    let p = &summary.pooled;
    let a = p.rmse.mean <= 0.3;
    let b = p.pct_identical >= 70.0;
    let c = p.mae_at_clamp == 0 && p.test_bone_blocked == 0 && p.mae.max < 22.0;
    let d = METRICS.iter().all(|m| q.iter().any(|s| s.metric == *m && s.group == "pooled"))
        && files.iter().all(|f| f.exists());
    outcome(
        run.metrics.len() >= 500 && a && b && c && d && within(t, Duration::from_secs(300)),
        format!(
            "{} paths, rmse {:.3} ± {:.3} N ({:.2}% outliers), mae {:.3} ± {:.3} N ({:.2}% outliers), \
             {:.1}% identical, {} clamp-level MAE, {} quantile rows, {t:.2?}",
            run.metrics.len(),
            p.rmse.mean,
            p.rmse.sd,
            100.0 * p.rmse.outlier_fraction,
            p.mae.mean,
            p.mae.sd,
            100.0 * p.mae.outlier_fraction,
            p.pct_identical,
            p.mae_at_clamp,
            q.len()
        ),
    )
}

fn planner_constraints() -> Outcome {
    let start = Instant::now();
    let spec = PhantomSpec::default();
    let vol = generate(&spec).unwrap();
    let body = extract_body_mask(&vol, -500.0).unwrap();
    let cfg = PlannerConfig::default();
    let out = plan(&vol, &body, &cfg).unwrap();
    let risk = risk_mask(&vol.labels, &body);
    let g = vol.geometry;
    let mut violations = 0;
    for p in &out.paths {
        let o = p.origin_vec();
        let e = Vector3::from(p.target);
        let n = (p.length / 0.05).ceil() as usize;
        let hit = (0..=n).any(|i| {
            let x = o + (e - o) * (i as f64 / n as f64);
            risk[g.nearest_index(&x).unwrap()]
        });
        if hit || p.length > cfg.max_length || p.q < cfg.q_min {
            violations += 1;
        }
    }
    let shell = generate_bone_shell(&spec).unwrap();
    let shell_body = extract_body_mask(&shell, -500.0).unwrap();
    let shell_paths = plan(&shell, &shell_body, &cfg).unwrap().paths.len();
    let t = start.elapsed();
    outcome(
        !out.paths.is_empty() && violations == 0 && shell_paths == 0 && within(t, Duration::from_secs(60)),
        format!(
            "{} paths walked, {violations} violations, bone shell gives {shell_paths} paths, {t:.2?}",
            out.paths.len()
        ),
    )
}

fn advance_to(s: &mut NeedleSession, depth: f64) -> Vec<needlesim::engine::StepResult> {
    let mut out = Vec::new();
    while s.depth() + STEP <= depth {
        out.push(s.advance(STEP).unwrap());
    }
    out
}

fn slab_session(layers: &[(TissueLabel, usize)]) -> NeedleSession {
    let c = Arc::new(layered_slab(layers, 1.0).unwrap());
    NeedleSession::new(c, Vector3::new(0.0, 1.0, 1.0), Vector3::x(), EngineConfig::default()).unwrap()
}

fn engine_semantics() -> Outcome {
    let mut fails = Vec::new();

    // skin holds its sustain force after the puncture
    let mut s = slab_session(&[(Air, 3), (Skin, 12)]);
    let r = advance_to(&mut s, 13.0);
    let pierced = r.iter().position(|x| x.events.iter().any(|e| matches!(e, Event::Puncture { .. })));
    match pierced {
        Some(i) if r[i..].iter().all(|x| x.magnitude == 0.7) => {}
        _ => fails.push("skin hold"),
    }

    // fascia into liver is cut without a ramp
    let mut s = slab_session(&[(Air, 2), (Fascia, 4), (Liver, 6)]);
    let r = advance_to(&mut s, 11.0);
    let i = r.iter().position(|x| x.label == Liver).unwrap();
    if !(r[i].phase == Phase::Pass
        && r[i].magnitude == 0.9
        && r[i].events.contains(&Event::TissueTransition { from: Fascia, to: Liver })
        && !r[i..].iter().any(|x| x.phase == Phase::PrePuncture))
    {
        fails.push("fascia to liver");
    }

    // bone clamps at the device maximum with the proxy frozen
    let mut s = slab_session(&[(Air, 2), (FatSoft, 3), (Bone, 6)]);
    let r = advance_to(&mut s, 8.0);
    let i = r.iter().position(|x| x.phase == Phase::BoneBlocked).unwrap();
    let proxy = s.proxy_depth();
    let more = advance_to(&mut s, 10.0);
    if !(r[i..].iter().chain(&more).all(|x| x.magnitude == 22.0) && s.proxy_depth() == proxy) {
        fails.push("bone clamp");
    }

    // retraction and pass forces stay below the local sustain force
    let mut s = slab_session(&[(Air, 2), (Skin, 2), (FatSoft, 4), (Fascia, 4), (FatSoft, 3), (Liver, 10)]);
    let fwd = advance_to(&mut s, 24.0);
    let table = HapticTable::default();
    let r_of = |l: TissueLabel| table.params_of(l).unwrap().sustain;
    if fwd.iter().any(|x| x.phase == Phase::Pass && x.magnitude > r_of(x.label) + 1e-12) {
        fails.push("pass bound");
    }
    let mut back_ok = true;
    while s.depth() > STEP {
        let x = s.retract(STEP).unwrap();
        back_ok &= x.magnitude <= r_of(x.label) + 1e-12;
    }
    if !back_ok {
        fails.push("retraction bound");
    }

    outcome(
        fails.is_empty(),
        if fails.is_empty() {
            "skin hold, fascia to liver cut, bone clamp, retraction and pass bounds".to_string()
        } else {
            format!("failed: {}", fails.join(", "))
        },
    )
}

fn real_time(case: &Case) -> Outcome {
    let body = Arc::new(extract_body_mask(&case.volume, -500.0).unwrap());
    let c = Arc::new(
        Classifier::new(
            case.volume.clone(),
            LabelProvider::full_segmentation(&case.volume),
            body.clone(),
            HapticTable::default(),
        )
        .unwrap(),
    );
    // straight 90 mm lateral run between two ribs
    let o = Vector3::new(6.0, 56.0, 29.0);
    let mut s = NeedleSession::new(c, o, Vector3::x(), EngineConfig::default()).unwrap();
    let n = (90.0 / STEP).round() as usize;
    let start = Instant::now();
    for _ in 0..n {
        s.advance(STEP).unwrap();
    }
    let mean = start.elapsed() / n as u32;
    outcome(
        mean < Duration::from_millis(1),
        format!("mean advance {mean:.2?} over {n} steps"),
    )
}

fn jnd_arithmetic() -> Outcome {
    let f = jnd_percent(0.8, 0.145).unwrap();
    let d = jnd_percent(28.0, 3.0).unwrap();
    outcome(
        (f - 18.125).abs() < 1e-9 && (d - 10.71).abs() < 0.005 && f.round() == 18.0 && d.round() == 11.0,
        format!("force {f:.4}%, distance {d:.4}%"),
    )
}

fn main() {
    let case = Case::phantom("phantom", &PhantomSpec::default(), &DegradeSpec::default()).unwrap();
    let checks: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("spring puncture equivalence", Box::new(spring_equivalence)),
        ("oracle equivalence", Box::new(|| oracle_equivalence(&case))),
        ("boundary-shift fidelity", Box::new(boundary_shift)),
        ("desk-scale study", Box::new(|| desk_study(&case))),
        ("planner hard constraints", Box::new(planner_constraints)),
        ("engine semantics", Box::new(engine_semantics)),
        ("real-time contract", Box::new(|| real_time(&case))),
        ("JND arithmetic", Box::new(jnd_arithmetic)),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        let o = check();
        if !o.pass {
            failed += 1;
        }
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
