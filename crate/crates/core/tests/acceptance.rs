//! End-to-end acceptance gate. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any hard criterion fails. Criteria 9 and 11 are soft:
//! their outcome is reported but does not affect the exit code.

mod common;

use std::collections::HashMap;
use std::time::Instant;

use common::*;
use murssl::data::Batch;
use murssl::harness::*;
use murssl::model::{ModelSpec, ParamSet, WeightMode};
use murssl::mur::{
    entropy_gradient, virtual_point_direct, virtual_point_lagrangian_ga, virtual_point_pga,
    MurConfig, Solver,
};
use murssl::objectives::{combined_loss, Coefficients, LossContext, Method};
use murssl::vd::{kl_node, kl_per_weight, VariationalLayerParams};
use murssl::{grad_check, Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const GRAD_TOL: f64 = 1e-4;
const GRAD_CONFIGS: usize = 24;
const SPHERE_TOL: f64 = 1e-9;
const SOLVER_FRACTION: f64 = 0.95;
const MOMENT_SE: f64 = 4.0;
const MOMENT_DRAWS: usize = 100_000;
const KL_TOL: f64 = 0.02;
const SSL_MARGIN_PP: f64 = 5.0;
const SSL_BUDGET_S: f64 = 600.0;
const SEEDS: u64 = 10;
const SENSITIVITY_WINS: usize = 8;
const ABLATION_SEEDS: usize = 7;
const SPARSITY_SEEDS: u64 = 5;
const TUNING_SCALES: [f64; 3] = [0.5, 1.0, 2.0];
const ABLATION_SCALES: [f64; 4] = [0.1, 0.5, 1.0, 4.0];

struct Gate {
    results: Vec<(usize, bool, bool)>,
}

impl Gate {
    fn report(&mut self, id: usize, name: &str, soft: bool, pass: bool, detail: String) {
        let tag = if pass { "PASS" } else { "FAIL" };
        let kind = if soft { " (soft)" } else { "" };
        println!("[{tag}] {id:>2} {name}{kind}: {detail}");
        self.results.push((id, soft, pass));
    }
}

/// Trained runs keyed by config and seed, shared across criteria.
#[derive(Default)]
struct Runs {
    cache: HashMap<String, Vec<RunResult>>,
}

impl Runs {
    fn get(&mut self, cfg: &ExperimentConfig) -> &[RunResult] {
        let key = cfg.to_json();
        self.cache
            .entry(key)
            .or_insert_with(|| run_experiment(cfg).expect("training run").runs)
    }

    fn errors(&mut self, cfg: &ExperimentConfig) -> Vec<f64> {
        self.get(cfg).iter().map(|r| r.last().test_error).collect()
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn desk(seeds: u64) -> ExperimentConfig {
    ExperimentConfig {
        seeds: (0..seeds).collect(),
        ..Default::default()
    }
}

fn supervised(seeds: u64) -> ExperimentConfig {
    let mut c = desk(seeds);
    c.lambda1.peak = 0.0;
    c
}

fn mut_cfg(seeds: u64, scale: f64) -> ExperimentConfig {
    let mut c = desk(seeds);
    c.method = Method::Mut;
    c.lambda1.peak = 0.0;
    c.lambda3.peak = 4.0;
    c.mur = Some(MurSettings {
        radius_scale: scale,
        ..Default::default()
    });
    c
}

fn mt_cfg(seeds: u64) -> ExperimentConfig {
    let mut c = desk(seeds);
    c.method = Method::Mt;
    c
}

fn with_mur(mut c: ExperimentConfig, scale: f64) -> ExperimentConfig {
    c.lambda3.peak = 4.0;
    c.mur = Some(MurSettings {
        radius_scale: scale,
        ..Default::default()
    });
    c
}

fn c1_gradients(gate: &mut Gate) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let methods = [Method::Pi, Method::Mt, Method::Ict, Method::Mut];
    let solvers = [Solver::Direct, Solver::Pga, Solver::Laga, Solver::Random];
    let mut worst: f64 = 0.0;
    let mut checks = 0;
    for i in 0..GRAD_CONFIGS {
        let d = rng.gen_range(2..4);
        let k = rng.gen_range(2..5);
        let vbi = i % 2 == 1;
        let spec = ModelSpec {
            widths: vec![d, rng.gen_range(3..7), k],
            weight_mode: if vbi {
                WeightMode::Variational
            } else {
                WeightMode::Deterministic
            },
            log_var_init: rng.gen_range(-4.0..-1.0),
            dropout: if i % 3 == 0 { 0.2 } else { 0.0 },
            ..ModelSpec::desk(d, k)
        };
        let student = ParamSet::init(&spec, rng.gen()).unwrap();
        let teacher = ParamSet::init(&spec, rng.gen()).unwrap();
        let n = 5;
        let x =
            Tensor::matrix(n, d, (0..n * d).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap();
        let labels: Vec<i64> = (0..n)
            .map(|r| {
                if r < 2 {
                    rng.gen_range(0..k as i64)
                } else {
                    -1
                }
            })
            .collect();
        let batch = Batch::new(x, labels, k).unwrap();
        let mur = MurConfig {
            radius: rng.gen_range(0.1..1.0),
            solver: solvers[i % 4],
            lr: 0.3,
            steps: 3,
        };
        let method = methods[(i / 2) % 4];
        let mut lg = combined_loss(&LossContext {
            spec: &spec,
            student: &student,
            teacher: Some(&teacher),
            batch: &batch,
            method,
            coefficients: Coefficients {
                consistency: rng.gen_range(0.5..10.0),
                kl: rng.gen_range(0.01..1.0),
                mur: rng.gen_range(0.5..5.0),
            },
            mur: Some(&mur),
            vbi,
            kl_scale: 0.05,
            mixup_alpha: 1.0,
            seed: rng.gen(),
        })
        .unwrap();
        let leaves: Vec<_> = lg
            .student
            .layers
            .iter()
            .flat_map(|l| [Some(l.weight), Some(l.bias), l.log_var])
            .flatten()
            .collect();
        for leaf in leaves {
            worst = worst.max(grad_check(&mut lg.graph, lg.total, leaf, 1e-6).unwrap());
            checks += 1;
        }
        if vbi {
            let layer = &student.layers[0];
            let mut g = Graph::new();
            let t = g.leaf(layer.weight.clone());
            let lv = g.leaf(layer.log_var.clone().unwrap());
            let kl = kl_node(&mut g, t, lv);
            worst = worst.max(grad_check(&mut g, kl, t, 1e-6).unwrap());
            worst = worst.max(grad_check(&mut g, kl, lv, 1e-6).unwrap());
            checks += 2;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    gate.report(
        1,
        "gradient integrity",
        false,
        worst <= GRAD_TOL && secs < 60.0,
        format!("{GRAD_CONFIGS} configs, {checks} leaf checks, max rel err {worst:.2e} (tol {GRAD_TOL:e}), {secs:.1}s (limit 60s)"),
    );
}

fn c2_direct_oracle(gate: &mut Gate) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut violations = 0;
    let mut worst_sphere: f64 = 0.0;
    let cases = 10;
    for _ in 0..cases {
        let d = rng.gen_range(2..6);
        let x0: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let g0: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let r = rng.gen_range(0.05..5.0);
        let star = virtual_point_direct(&x0, &g0, r).unwrap().point.into_data();
        let lin = |x: &[f64]| {
            x.iter()
                .zip(&x0)
                .zip(&g0)
                .map(|((a, b), g)| g * (a - b))
                .sum::<f64>()
        };
        let dist = star
            .iter()
            .zip(&x0)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        worst_sphere = worst_sphere.max((dist - r).abs());
        let best = lin(&star);
        for _ in 0..1000 {
            let u: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let un = u.iter().map(|v| v * v).sum::<f64>().sqrt();
            let rho = r * rng.gen::<f64>().powf(1.0 / d as f64);
            let x: Vec<f64> = x0.iter().zip(&u).map(|(a, b)| a + rho * b / un).collect();
            if lin(&x) >= best {
                violations += 1;
            }
        }
    }
    gate.report(
        2,
        "direct virtual point oracle",
        false,
        violations == 0 && worst_sphere <= SPHERE_TOL,
        format!("{cases}×1000 in-ball samples, {violations} violations, max |‖x*−x0‖−r| {worst_sphere:.1e} (tol {SPHERE_TOL:e})"),
    );
}

fn c3_solver_quality(gate: &mut Gate) {
    let (spec, params) = logistic_model();
    let x0 = Tensor::row_vector(&LOGISTIC_X0);
    let r = LOGISTIC_RADIUS;
    let grid = grid_max_entropy(&spec, &params, &LOGISTIC_X0, r);
    let pga = virtual_point_pga(
        &spec,
        &params,
        &x0,
        &MurConfig {
            radius: r,
            solver: Solver::Pga,
            lr: 0.3,
            steps: 5,
        },
    )
    .unwrap();
    let laga = virtual_point_lagrangian_ga(
        &spec,
        &params,
        &x0,
        &MurConfig {
            radius: r,
            solver: Solver::Laga,
            lr: 0.1,
            steps: 8,
        },
        0,
    )
    .unwrap();
    let h_pga = entropy_at(&spec, &params, pga.point.data());
    let h_laga = entropy_at(&spec, &params, laga.point.data());
    let worst_iter = pga
        .trace
        .iter()
        .map(|t| t.distance - r)
        .fold(f64::NEG_INFINITY, f64::max);
    let g0 = entropy_gradient(&spec, &params, &x0).unwrap();
    let h_direct = entropy_at(
        &spec,
        &params,
        virtual_point_direct(&LOGISTIC_X0, g0.data(), r)
            .unwrap()
            .point
            .data(),
    );
    let pass = h_pga >= SOLVER_FRACTION * grid
        && h_laga >= SOLVER_FRACTION * grid
        && worst_iter <= SPHERE_TOL;
    gate.report(
        3,
        "solver quality",
        false,
        pass,
        format!(
            "grid max {grid:.5}, PGA {h_pga:.5} ({:.1}%), LaGA {h_laga:.5} ({:.1}%), direct {h_direct:.5}; max PGA excess {worst_iter:.1e} (need ≥{:.0}%, excess ≤ {SPHERE_TOL:e})",
            100.0 * h_pga / grid,
            100.0 * h_laga / grid,
            100.0 * SOLVER_FRACTION
        ),
    );
}

fn c4_local_reparam(gate: &mut Gate) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    let mut comparisons = 0;
    for _ in 0..10 {
        let (m, n) = (rng.gen_range(2..5), rng.gen_range(1..4));
        let theta =
            Tensor::matrix(m, n, (0..m * n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let lv =
            Tensor::matrix(m, n, (0..m * n).map(|_| rng.gen_range(-3.0..0.5)).collect()).unwrap();
        let layer = VariationalLayerParams::new(theta.clone(), lv.clone()).unwrap();
        let x = Tensor::matrix(1, m, (0..m).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap();
        let (nu, omega2) = layer.moments(&x).unwrap();
        let sd = lv.map(|v| (0.5 * v).exp());
        let mut sum = vec![0.0; n];
        let mut sq = vec![0.0; n];
        for _ in 0..MOMENT_DRAWS {
            for j in 0..n {
                let mut z = 0.0;
                for i in 0..m {
                    let e: f64 = rng.sample(StandardNormal);
                    z += x.get(0, i) * (theta.get(i, j) + sd.get(i, j) * e);
                }
                sum[j] += z;
                sq[j] += z * z;
            }
        }
        let nd = MOMENT_DRAWS as f64;
        for j in 0..n {
            let mc_mean = sum[j] / nd;
            let mc_var = (sq[j] - nd * mc_mean * mc_mean) / (nd - 1.0);
            let (mu, var) = (nu.get(0, j), omega2.get(0, j));
            let se_mean = (var / nd).sqrt();
            let se_var = var * (2.0 / (nd - 1.0)).sqrt();
            worst = worst
                .max((mc_mean - mu).abs() / se_mean)
                .max((mc_var - var).abs() / se_var);
            comparisons += 2;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    gate.report(
        4,
        "local reparameterization moments",
        false,
        worst <= MOMENT_SE && secs < 60.0,
        format!("10 layers, {comparisons} moment comparisons, worst {worst:.2} SE (limit {MOMENT_SE}), {secs:.1}s"),
    );
}

fn expected_log_abs(log_alpha: f64, n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = (0.5 * log_alpha).exp();
    (0..n)
        .map(|_| {
            let e: f64 = rng.sample(StandardNormal);
            (1.0 + s * e).abs().ln()
        })
        .sum::<f64>()
        / n as f64
}

fn c5_kl(gate: &mut Gate) {
    let n = 2_000_000;
    let e0 = expected_log_abs(0.0, n, 50);
    let grid: Vec<f64> = (0..=16).map(|i| -4.0 + 0.5 * i as f64).collect();
    let mut worst: f64 = 0.0;
    for (i, &a) in grid.iter().enumerate() {
        let mc = -0.5 * a + expected_log_abs(a, n, 51 + i as u64) - e0;
        worst = worst.max((mc - (kl_per_weight(a) - kl_per_weight(0.0))).abs());
    }
    let monotone = grid
        .windows(2)
        .all(|w| kl_per_weight(w[1]) <= kl_per_weight(w[0]));
    gate.report(
        5,
        "KL closed form",
        false,
        worst <= KL_TOL && monotone,
        format!("max |closed − MC| difference {worst:.4} nats on log α ∈ [−4, 4] (tol {KL_TOL}), monotone: {monotone}"),
    );
}

fn streams(runs: &[RunResult]) -> Vec<String> {
    runs.iter().map(|r| metrics_csv(&r.records)).collect()
}

fn c6_reduction(gate: &mut Gate) {
    let seeds = 2;
    let mut runs = Runs::default();
    let mut pi_mur = with_mur(desk(seeds), 1.0);
    pi_mur.lambda1.peak = 0.0;
    let a = streams(runs.get(&mut_cfg(seeds, 1.0))) == streams(runs.get(&pi_mur));

    let mut mt_vbi = mt_cfg(seeds);
    mt_vbi.vbi = true;
    let mut mt_vbi_mur = with_mur(mt_vbi.clone(), 1.0);
    mt_vbi_mur.lambda3.peak = 0.0;
    let b = streams(runs.get(&mt_vbi)) == streams(runs.get(&mt_vbi_mur));

    let mut zero = with_mur(desk(seeds), 1.0);
    zero.lambda1.peak = 0.0;
    zero.lambda3.peak = 0.0;
    let c = streams(runs.get(&zero)) == streams(runs.get(&supervised(seeds)));
    gate.report(
        6,
        "reduction lattice",
        false,
        a && b && c,
        format!("MUT≡Π+MUR(λ1=0): {a}, MT+VBI+MUR(λ3=0)≡MT+VBI: {b}, all-λ-zero≡supervised: {c} (bit-identical streams, {seeds} seeds)"),
    );
}

fn c7_ssl_benefit(gate: &mut Gate, runs: &mut Runs) -> f64 {
    let start = Instant::now();
    let sup = mean(&runs.errors(&supervised(SEEDS)));
    let sweep: Vec<(f64, f64)> = TUNING_SCALES
        .iter()
        .map(|&s| (s, mean(&runs.errors(&mut_cfg(SEEDS, s)))))
        .collect();
    let &(best_scale, best) = sweep
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("non-empty sweep");
    let mt = mean(&runs.errors(&mt_cfg(SEEDS)));
    let mut mt_vd_mur = with_mur(mt_cfg(SEEDS), best_scale);
    mt_vd_mur.vbi = true;
    let mvm = mean(&runs.errors(&mt_vd_mur));
    let secs = start.elapsed().as_secs_f64();
    let pass = best <= sup - SSL_MARGIN_PP && mvm <= mt && secs < SSL_BUDGET_S;
    let sweep_txt: Vec<String> = sweep.iter().map(|(s, e)| format!("{s}×:{e:.2}")).collect();
    gate.report(
        7,
        "SSL benefit",
        false,
        pass,
        format!(
            "supervised {sup:.2}%, MUT sweep [{}] → tuned {best_scale}× {best:.2}% (need ≤ {:.2}%); MT {mt:.2}%, MT+VD+MUR {mvm:.2}%; {secs:.0}s (limit {SSL_BUDGET_S}s)",
            sweep_txt.join(", "),
            sup - SSL_MARGIN_PP
        ),
    );
    best_scale
}

fn c8_sensitivity(gate: &mut Gate, runs: &mut Runs, scale: f64) {
    let plain: Vec<f64> = runs
        .get(&mt_cfg(SEEDS))
        .iter()
        .map(|r| r.last().sensitivity)
        .collect();
    let mur: Vec<f64> = runs
        .get(&with_mur(mt_cfg(SEEDS), scale))
        .iter()
        .map(|r| r.last().sensitivity)
        .collect();
    let wins = plain.iter().zip(&mur).filter(|(p, m)| m < p).count();
    gate.report(
        8,
        "sensitivity reduction",
        false,
        wins >= SENSITIVITY_WINS,
        format!(
            "MT+MUR below MT in {wins}/{SEEDS} paired seeds (need ≥{SENSITIVITY_WINS}); mean {:.3} vs {:.3}",
            mean(&mur),
            mean(&plain)
        ),
    );
}

fn c9_radius_ablation(gate: &mut Gate, runs: &mut Runs) {
    let curves: Vec<Vec<f64>> = ABLATION_SCALES
        .iter()
        .map(|&s| runs.errors(&mut_cfg(SEEDS, s)))
        .collect();
    let interior = (0..SEEDS as usize)
        .filter(|&i| {
            let e: Vec<f64> = curves.iter().map(|c| c[i]).collect();
            e[1].min(e[2]) < e[0].min(e[3])
        })
        .count();
    let means: Vec<String> = ABLATION_SCALES
        .iter()
        .zip(&curves)
        .map(|(s, c)| format!("{s}×:{:.2}", mean(c)))
        .collect();
    gate.report(
        9,
        "radius ablation shape",
        true,
        interior >= ABLATION_SEEDS,
        format!("interior minimum in {interior}/{SEEDS} seeds (need ≥{ABLATION_SEEDS}); mean errors [{}]", means.join(", ")),
    );
}

fn c10_sparsity(gate: &mut Gate, runs: &mut Runs) {
    let pruned = |runs: &mut Runs, peak: f64| {
        let mut c = mt_cfg(SPARSITY_SEEDS);
        c.vbi = true;
        c.lambda2.peak = peak;
        mean(
            &runs
                .get(&c)
                .iter()
                .map(|r| r.last().fraction_pruned)
                .collect::<Vec<_>>(),
        )
    };
    let high = pruned(runs, 0.5);
    let low = pruned(runs, 0.005);
    gate.report(
        10,
        "sparsity response",
        false,
        high > low,
        format!(
            "mean fraction pruned λ2=0.5: {high:.4}, λ2=0.005: {low:.4} ({SPARSITY_SEEDS} seeds)"
        ),
    );
}

fn c11_rr(gate: &mut Gate, runs: &mut Runs, scale: f64) {
    let mur = mean(&runs.errors(&mut_cfg(SEEDS, scale)));
    let mut rr = mut_cfg(SEEDS, scale);
    rr.rr_baseline = true;
    let rr = mean(&runs.errors(&rr));
    gate.report(
        11,
        "RR comparison",
        true,
        mur <= rr,
        format!("tuned radius {scale}×: MUR {mur:.2}% vs RR {rr:.2}% over {SEEDS} paired seeds"),
    );
}

fn c12_determinism(gate: &mut Gate) {
    let mut configs = Vec::new();
    let mut a = with_mur(mt_cfg(1), 1.0);
    a.vbi = true;
    a.mur.as_mut().unwrap().solver = Solver::Pga;
    a.mur.as_mut().unwrap().steps = 3;
    configs.push(a);
    let mut b = desk(1);
    b.method = Method::Ict;
    b.seeds = vec![17];
    configs.push(b);
    let mut c = mut_cfg(1, 1.0);
    c.mur.as_mut().unwrap().solver = Solver::Laga;
    c.mur.as_mut().unwrap().steps = 2;
    c.dataset.kind = DatasetKind::Rings;
    configs.push(c);
    let identical = configs.iter().all(|cfg| {
        let first = streams(&run_experiment(cfg).unwrap().runs);
        let second = streams(&run_experiment(cfg).unwrap().runs);
        first == second
    });
    gate.report(
        12,
        "determinism",
        false,
        identical,
        format!("{} configs (MT+VD+MUR/PGA, ICT, MUT/LaGA on rings) run twice: identical streams {identical}", configs.len()),
    );
}

fn main() {
    let start = Instant::now();
    let mut gate = Gate {
        results: Vec::new(),
    };
    let mut runs = Runs::default();
    c1_gradients(&mut gate);
    c2_direct_oracle(&mut gate);
    c3_solver_quality(&mut gate);
    c4_local_reparam(&mut gate);
    c5_kl(&mut gate);
    c6_reduction(&mut gate);
    let scale = c7_ssl_benefit(&mut gate, &mut runs);
    c8_sensitivity(&mut gate, &mut runs, scale);
    c9_radius_ablation(&mut gate, &mut runs);
    c10_sparsity(&mut gate, &mut runs);
    c11_rr(&mut gate, &mut runs, scale);
    c12_determinism(&mut gate);
    let hard_failures = gate
        .results
        .iter()
        .filter(|(_, soft, pass)| !soft && !pass)
        .count();
    let soft_failures = gate
        .results
        .iter()
        .filter(|(_, soft, pass)| *soft && !pass)
        .count();
    println!(
        "acceptance: {} criteria, {hard_failures} hard failures, {soft_failures} soft failures, {:.0}s",
        gate.results.len(),
        start.elapsed().as_secs_f64()
    );
    if hard_failures > 0 {
        std::process::exit(1);
    }
}
