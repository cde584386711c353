//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::process::ExitCode;
use std::time::Instant;

use bramp::diagnostics::{
    blind_scenario_report, candidate_posterior, posterior_std_trace, BlindScenario, VisitSchedule,
};
use bramp::dynamics::{rk4_step, Control, FnDrift, State, Theta};
use bramp::harness::{run_benchmark, run_campaign, run_episode, steps_csv, Campaign, ExperimentConfig, Metric};
use bramp::risk::{builtin_instances, dp_solve_discrete, empirical_cvar, random_instance, DpMode};
use bramp::RandomStream;

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

fn desk_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.run.n_runs = 10;
    cfg.run.steps = 100;
    cfg.run.seed = 20240;
    cfg.filter.particles = 500;
    cfg.controller.scenarios = 16;
    cfg.controller.horizon = 5;
    cfg
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn kind_median(c: &Campaign, kind: &str, m: Metric) -> f64 {
    median(c.records.iter().filter(|r| r.kind == kind && r.aborted.is_none()).map(|r| r.metric(m)).collect())
}

fn forward_shrinkage(c: &Campaign) -> Outcome {
    let mut bad = 0;
    for r in &c.records {
        if r.steps.windows(2).any(|w| w[1].eps > w[0].eps) {
            bad += 1;
        }
    }
    outcome(bad == 0, format!("{} episodes, {bad} with an eps increase", c.records.len()))
}

fn nested_dominates_joint() -> Outcome {
    let mut rng = RandomStream::new(77);
    let mut worst = f64::INFINITY;
    for _ in 0..50 {
        let m = random_instance(&mut rng);
        let nested = dp_solve_discrete(&m, DpMode::Nested).unwrap();
        let joint = dp_solve_discrete(&m, DpMode::Joint).unwrap();
        for (a, b) in nested.value(m.horizon).iter().zip(joint.value(m.horizon)) {
            worst = worst.min(a - b);
        }
    }
    let mut gap: f64 = 0.0;
    for inst in builtin_instances() {
        let n = inst.mdp.horizon;
        let nested = dp_solve_discrete(&inst.mdp, DpMode::Nested).unwrap();
        let joint = dp_solve_discrete(&inst.mdp, DpMode::Joint).unwrap();
        for (a, b) in nested.value(n).iter().zip(joint.value(n)) {
            gap = gap.max(a - b);
        }
    }
    outcome(
        worst >= -1e-9 && gap > 1e-3,
        format!("min(V_nested - V_joint) over 50 random = {worst:.3e}; largest built-in gap = {gap:.4}"),
    )
}

fn dp_monotonicity() -> Outcome {
    let mut lines = Vec::new();
    let mut pass = true;
    let (mut with, mut without) = (0, 0);
    for inst in builtin_instances() {
        let m = &inst.mdp;
        let delta = m.terminal_descent_delta();
        let descent = m.satisfies_terminal_descent(0.0);
        if descent {
            with += 1;
        } else {
            without += 1;
        }
        let bound = if descent { 0.0 } else { delta };
        let sol = dp_solve_discrete(m, DpMode::Nested).unwrap();
        let ok = (0..m.horizon).all(|i| {
            sol.value(i + 1).iter().zip(sol.value(i)).all(|(a, b)| *a <= b + bound + 1e-9)
        });
        pass &= ok;
        lines.push(format!("{}: delta={delta:+.3} ok={ok}", inst.name));
    }
    outcome(pass && with > 0 && without > 0, lines.join("; "))
}

fn cvar_coherence() -> Outcome {
    let mut rng = RandomStream::new(4242);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = 5 + (rng.next_u64() % 60) as usize;
        let alpha = rng.uniform_in(0.02, 0.98);
        let x: Vec<f64> = (0..n).map(|_| 3.0 * rng.normal()).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.uniform_in(-5.0, 5.0)).collect();
        let c = |v: &[f64]| empirical_cvar(v, alpha).unwrap();
        let sum: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + b).collect();
        // subadditivity
        worst = worst.max(c(&sum) - c(&x) - c(&y));
        // monotonicity: x ≤ x + |y|
        let bigger: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + b.abs()).collect();
        worst = worst.max(c(&x) - c(&bigger));
        // translation equivariance
        let shift = rng.uniform_in(-10.0, 10.0);
        let shifted: Vec<f64> = x.iter().map(|a| a + shift).collect();
        worst = worst.max((c(&shifted) - c(&x) - shift).abs());
        // positive homogeneity
        let lam = rng.uniform_in(0.01, 10.0);
        let scaled: Vec<f64> = x.iter().map(|a| lam * a).collect();
        worst = worst.max((c(&scaled) - lam * c(&x)).abs());
    }
    // Inf-form oracle on a lattice that contains every sample.
    let mut grid_err: f64 = 0.0;
    for _ in 0..200 {
        let n = 1 + (rng.next_u64() % 30) as usize;
        let s: Vec<f64> = (0..n).map(|_| ((rng.next_u64() % 257) as f64 - 128.0) / 8.0).collect();
        let alpha = ((rng.next_u64() % 19) + 1) as f64 / 20.0;
        let mut best = f64::INFINITY;
        for k in -136..=136 {
            let t = k as f64 / 8.0;
            let tail: f64 = s.iter().map(|z| (z - t).max(0.0)).sum::<f64>() / n as f64;
            best = best.min(t + tail / alpha);
        }
        grid_err = grid_err.max((empirical_cvar(&s, alpha).unwrap() - best).abs());
    }
    outcome(
        worst <= 1e-9 && grid_err <= 1e-9,
        format!("max axiom violation {worst:.2e}; max grid-oracle error {grid_err:.2e}"),
    )
}

fn filter_consistency() -> Outcome {
    let prior_std = 2.5 / 12f64.sqrt();
    let mut hits = 0;
    let mut finals = Vec::new();
    for seed in 0..20 {
        let trace = posterior_std_trace(200, 1000, 9000 + seed).unwrap();
        let last = trace[200];
        finals.push(last / prior_std);
        if last < 0.1 * prior_std {
            hits += 1;
        }
    }
    let worst = finals.iter().copied().fold(0.0, f64::max);
    outcome(hits >= 18, format!("{hits}/20 seeds below 10% of prior std at step 200 (worst ratio {worst:.4})"))
}

fn blind_region() -> Outcome {
    let sc = BlindScenario::new();
    let rep = blind_scenario_report(&sc, 1e-8).unwrap();
    let structure = rep.at_eta1.zones == vec![vec![0, 1]] && rep.combined.is_empty();
    let seeds = 20;
    let mut concentrated = 0;
    let mut stuck = 0;
    for seed in 0..seeds {
        let alt = candidate_posterior(&sc, VisitSchedule::Alternating, 500, 300, 500 + seed).unwrap();
        if alt[sc.truth] > 0.95 {
            concentrated += 1;
        }
        let only = candidate_posterior(&sc, VisitSchedule::OnlyEta1, 500, 300, 500 + seed).unwrap();
        if only[1] > 0.2 {
            stuck += 1;
        }
    }
    outcome(
        structure && concentrated * 10 >= seeds * 9 && stuck * 10 >= seeds * 9,
        format!(
            "eta1 zones {:?}, combined {:?}; alternating >0.95 on truth {concentrated}/{seeds}; eta1-only partner >0.2 {stuck}/{seeds}",
            rep.at_eta1.zones, rep.combined.zones
        ),
    )
}

fn qualitative_ordering(c: &Campaign) -> Outcome {
    let cost = |k| kind_median(c, k, Metric::TotalCost);
    let perr = |k| kind_median(c, k, Metric::ParamError);
    let viol = |k| kind_median(c, k, Metric::Violations);
    let a = cost("tube") > cost("risk_averse");
    let b = ["nominal", "stochastic", "risk_averse"].iter().all(|k| perr("tube") > perr(k));
    let v = viol("risk_averse") <= viol("nominal") && viol("risk_averse") <= viol("stochastic");
    outcome(
        a && b && v,
        format!(
            "median cost tube {:.1} vs risk_averse {:.1} [{a}]; median param error n/t/s/r {:.4}/{:.4}/{:.4}/{:.4} [{b}]; median violations n/s/r {}/{}/{} [{v}]",
            cost("tube"),
            cost("risk_averse"),
            perr("nominal"),
            perr("tube"),
            perr("stochastic"),
            perr("risk_averse"),
            viol("nominal"),
            viol("stochastic"),
            viol("risk_averse"),
        ),
    )
}

fn warm_start_dominance(c: &Campaign) -> Outcome {
    let calls: usize = c.records.iter().map(|r| r.steps.len()).sum();
    let bad = c
        .records
        .iter()
        .flat_map(|r| &r.steps)
        .filter(|s| !(s.planned_value <= s.warm_value + 1e-12))
        .count();
    outcome(bad == 0, format!("{calls} planning calls, {bad} worse than the warm start"))
}

fn rk4_order() -> Outcome {
    let decay = FnDrift::new(1, 1, 1, |x, _u, _t, dx| dx[0] = -x[0]);
    let err = |h: f64| {
        let steps = (1.0 / h).round() as usize;
        let mut x = State::new(&[1.0]);
        for _ in 0..steps {
            x = rk4_step(&decay, &x, &Control::new(&[0.0]), &Theta::new(&[0.0]), h).unwrap();
        }
        (x[0] - (-1f64).exp()).abs()
    };
    let hs: [f64; 4] = [0.2, 0.1, 0.05, 0.025];
    let pts: Vec<(f64, f64)> = hs.iter().map(|h| (h.ln(), err(*h).ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
        / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    outcome((slope - 4.0).abs() <= 0.2, format!("log-log slope {slope:.4}"))
}

fn determinism(c: &Campaign, cfg: &ExperimentConfig) -> Outcome {
    // Re-run two campaign episodes and compare CSV bytes.
    let kinds = cfg.all_kinds().unwrap();
    let mut same = true;
    for (ki, run) in [(3usize, 0usize), (1, 7)] {
        let again = run_episode(cfg, &kinds[ki], run).unwrap();
        let orig = c
            .records
            .iter()
            .find(|r| r.kind == kinds[ki].name() && r.run == run)
            .expect("episode in campaign");
        same &= steps_csv(std::slice::from_ref(orig)) == steps_csv(&[again]);
    }
    // And a whole (smaller) campaign twice.
    let mut small = cfg.clone();
    small.run.n_runs = 2;
    small.run.steps = 15;
    let a = run_campaign(&small, &kinds).unwrap();
    let b = run_campaign(&small, &kinds).unwrap();
    let campaign_same = steps_csv(&a.records) == steps_csv(&b.records) && a.table == b.table;
    outcome(same && campaign_same, format!("episode reruns identical: {same}; campaign rerun identical: {campaign_same}"))
}

fn main() -> ExitCode {
    let cfg = desk_config();
    let t0 = Instant::now();
    let campaign = run_benchmark(&cfg).expect("desk-scale campaign");
    let campaign_s = t0.elapsed().as_secs_f64();
    let aborted: usize = campaign.table.rows.iter().map(|r| r.aborted).sum();
    println!(
        "desk-scale campaign: 10 runs x 4 kinds x 100 steps, N_s=500, S=16, N=5, budget {}: {campaign_s:.1}s, {aborted} aborted",
        cfg.controller.budget
    );

    type Check<'a> = (&'a str, Box<dyn Fn() -> Outcome + 'a>);
    let checks: Vec<Check> = vec![
        ("1 forward shrinkage", Box::new(|| forward_shrinkage(&campaign))),
        ("2 nested dominates joint", Box::new(nested_dominates_joint)),
        ("3 DP monotonicity", Box::new(dp_monotonicity)),
        ("4 CVaR coherence", Box::new(cvar_coherence)),
        ("5 filter consistency", Box::new(filter_consistency)),
        ("6 blind regions", Box::new(blind_region)),
        ("7 benchmark ordering", Box::new(|| qualitative_ordering(&campaign))),
        ("8 warm-start dominance", Box::new(|| warm_start_dominance(&campaign))),
        ("9 RK4 order", Box::new(rk4_order)),
        ("10 determinism", Box::new(|| determinism(&campaign, &cfg))),
    ];
    let mut failed = 0;
    for (name, check) in &checks {
        let t = Instant::now();
        let o = check();
        if !o.pass {
            failed += 1;
        }
        println!(
            "{} criterion {name}: {} ({:.2}s)",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t.elapsed().as_secs_f64()
        );
    }
    println!("{} of {} criteria passed", checks.len() - failed, checks.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
