use proptest::prelude::*;
use ztspin::disorder::{self, CouplingLaw, DisorderRealization, DisorderSpec, FieldLaw};
use ztspin::dynamics::{
    classify_type, flip_statistics, flip_statistics_until, init_config, is_absorbing, run, EndReason, Epsilon,
    FlipRule, InitialLaw, RunParams, Scheduler, Trajectory, TypeLabel, WindowScheme,
};
use ztspin::hamiltonian::{Hamiltonian, SpinConfig, SpinSpace};
use ztspin::lattice::TorusLattice;
use ztspin::numeric::TAU_ZERO;

fn setup(dims: &[usize], space: SpinSpace, coupling: CouplingLaw, field: FieldLaw, seed: u64) -> Hamiltonian {
    let lat = TorusLattice::new(dims).unwrap();
    let dis = disorder::sample(&lat, &DisorderSpec::new(coupling, field, seed)).unwrap();
    Hamiltonian::new(lat, dis, space).unwrap()
}

fn uniform_law(space: SpinSpace) -> InitialLaw {
    let q = space.cardinality();
    InitialLaw::Weights(vec![1.0 / q as f64; q])
}

fn arb_rule() -> impl Strategy<Value = FlipRule> {
    prop_oneof![
        Just(FlipRule::GlauberZeroT),
        Just(FlipRule::UniformMinimizer),
        Just(FlipRule::OccupationWeighted),
    ]
}

fn arb_case() -> impl Strategy<Value = (Vec<usize>, SpinSpace, CouplingLaw, FieldLaw)> {
    let dims = prop_oneof![(3usize..40).prop_map(|l| vec![l]), (3usize..10, 3usize..10).prop_map(|(a, b)| vec![a, b])];
    let space = prop_oneof![Just(SpinSpace::Ising), (2u8..5).prop_map(SpinSpace::Potts)];
    let coupling = prop_oneof![
        Just(CouplingLaw::Constant(1.0)),
        Just(CouplingLaw::Gaussian { mean: 0.0, sd: 1.0 }),
        Just(CouplingLaw::PmJ { j: 1.0, alpha: 0.5 }),
        Just(CouplingLaw::Cauchy { loc: 0.0, scale: 1.0 }),
        Just(CouplingLaw::Hopfield { patterns: 2 }),
    ];
    let field = prop_oneof![Just(FieldLaw::Zero), Just(FieldLaw::Pm { h: 0.5, alpha: 0.5 })];
    (dims, space, coupling, field)
}

/// Replays the trajectory and checks every structural invariant.
fn check_trajectory(ham: &Hamiltonian, traj: &Trajectory) -> Result<(), TestCaseError> {
    let mut config = traj.initial.clone();
    let mut last_t = 0.0;
    let mut sum = 0.0;
    for e in &traj.events {
        prop_assert!(e.time > last_t, "times not strictly increasing");
        prop_assert!(e.time <= traj.end_time);
        prop_assert_ne!(e.old, e.new);
        prop_assert_eq!(config.get(e.site), e.old);
        prop_assert!(e.delta_h <= TAU_ZERO, "energy-raising flip {}", e.delta_h);
        let recomputed = ham.delta_h(e.site, &config, e.new);
        prop_assert!((recomputed - e.delta_h).abs() <= 1e-12 * recomputed.abs().max(1.0));
        let before = config.clone();
        config.set(e.site, e.new);
        let differing = (0..config.len()).filter(|&x| before.get(x) != config.get(x)).count();
        prop_assert_eq!(differing, 1);
        sum += e.delta_h;
        last_t = e.time;
    }
    prop_assert_eq!(&config, &traj.final_config());
    let residual = ham.total_energy(&config) - ham.total_energy(&traj.initial) - sum;
    prop_assert!(residual.abs() <= 1e-8, "telescoping residual {residual}");
    if traj.end_reason == EndReason::Absorbed {
        prop_assert!(is_absorbing(ham, FlipRule::GlauberZeroT, &config));
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(120))]

    #[test]
    fn trajectories_respect_zero_temperature_invariants(
        (dims, space, coupling, field) in arb_case(),
        rule in arb_rule(),
        all_sites in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let ham = setup(&dims, space, coupling, field, seed);
        let init = init_config(ham.lattice(), space, &uniform_law(space), seed).unwrap();
        let scheduler = if all_sites { Scheduler::AllSites } else { Scheduler::ActiveSites };
        let params = RunParams::new(30.0, seed).with_event_cap(20_000).with_scheduler(scheduler);
        let traj = run(&ham, rule, &init, params).unwrap();
        check_trajectory(&ham, &traj)?;
        prop_assert_eq!(run(&ham, rule, &init, params).unwrap(), traj.clone());

        let eps = [Epsilon::ZeroPlus, Epsilon::Value(0.1), Epsilon::Value(0.5), Epsilon::Value(2.0)];
        let stats = flip_statistics(&traj, &eps);
        for x in 0..init.len() {
            for k in 1..eps.len() {
                prop_assert!(stats.per_site[k][x] <= stats.per_site[k - 1][x]);
            }
        }
        let half = flip_statistics_until(&traj, &eps, traj.end_time / 2.0);
        for k in 0..eps.len() {
            prop_assert!(half.totals[k] <= stats.totals[k]);
        }
        // energy counting bound, every threshold, after every event
        let mut dh = 0.0;
        let mut counts = vec![0u64; eps.len()];
        for e in &traj.events {
            dh += e.delta_h;
            for (c, th) in counts.iter_mut().zip(&eps) {
                *c += u64::from(th.counts(e.delta_h));
            }
            for (c, th) in counts.iter().zip(&eps) {
                prop_assert!(dh <= -th.magnitude() * *c as f64 + 1e-9);
            }
        }
    }

    #[test]
    fn strict_drops_are_at_least_the_site_minimum(
        dims in prop_oneof![(3usize..30).prop_map(|l| vec![l]), (3usize..8, 3usize..8).prop_map(|(a, b)| vec![a, b])],
        pm_field in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let field = if pm_field { FieldLaw::Pm { h: 0.5, alpha: 0.5 } } else { FieldLaw::Zero };
        let ham = setup(&dims, SpinSpace::Ising, CouplingLaw::PmJ { j: 1.0, alpha: 0.5 }, field, seed);
        let init = init_config(ham.lattice(), SpinSpace::Ising, &InitialLaw::Lambda(0.5), seed).unwrap();
        let traj = run(&ham, FlipRule::GlauberZeroT, &init, RunParams::new(50.0, seed).with_event_cap(50_000)).unwrap();
        let n = init.len();
        let zero_plus = flip_statistics(&traj, &[Epsilon::ZeroPlus]).per_site.remove(0);
        for x in 0..n {
            let bar = ham.min_positive_drop(x);
            let at_bar = traj.events.iter().filter(|e| e.site == x && e.delta_h <= -bar).count() as u64;
            prop_assert_eq!(zero_plus[x], at_bar, "site {}", x);
        }
    }
}

/// Largest gap between the empirical CDF of `samples` and `cdf`.
fn ks_statistic(mut samples: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len() as f64;
    samples
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
        })
        .fold(0.0, f64::max)
}

fn two_sample_ks(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

#[test]
fn gaps_with_two_free_sites_are_unit_exponential() {
    // sites 0 and 1 are uncoupled and field-free, so each flips at rate 1/2;
    // every other site is pinned by its field
    let lat = TorusLattice::new(&[6]).unwrap();
    let dis = DisorderRealization::from_values(&lat, vec![0.0; 6], vec![0.0, 0.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
    let ham = Hamiltonian::new(lat, dis, SpinSpace::Ising).unwrap();
    let init = SpinConfig::uniform(SpinSpace::Ising, 6, 1).unwrap();
    for scheduler in [Scheduler::ActiveSites, Scheduler::AllSites] {
        let params = RunParams::new(1e9, 11).with_event_cap(10_000).with_scheduler(scheduler);
        let traj = run(&ham, FlipRule::GlauberZeroT, &init, params).unwrap();
        assert_eq!(traj.events.len(), 10_000);
        assert!(traj.events.iter().all(|e| e.site < 2));
        let mut prev = 0.0;
        let gaps: Vec<f64> = traj
            .events
            .iter()
            .map(|e| {
                let g = e.time - prev;
                prev = e.time;
                g
            })
            .collect();
        let d = ks_statistic(gaps, |x| 1.0 - (-x).exp());
        let critical = 1.628 / (10_000f64).sqrt();
        assert!(d < critical, "{scheduler:?}: KS statistic {d} >= {critical}");
    }
}

/// Exact probability of absorbing in all +1 for the L=5 ferromagnetic ring
/// under the zero-temperature Glauber rates, by iterating the embedded chain.
fn ring_absorption_oracle(start: usize) -> (f64, f64) {
    let n = 5;
    let spin = |s: usize, x: usize| if s >> x & 1 == 1 { 1.0 } else { -1.0 };
    let rates = |s: usize| -> Vec<(usize, f64)> {
        (0..n)
            .filter_map(|x| {
                let dh = 2.0 * spin(s, x) * (spin(s, (x + 1) % n) + spin(s, (x + n - 1) % n));
                let r = if dh < 0.0 { 1.0 } else if dh == 0.0 { 0.5 } else { 0.0 };
                (r > 0.0).then_some((s ^ (1 << x), r))
            })
            .collect()
    };
    let all_plus = (1 << n) - 1;
    let mut p_plus = vec![0.0; 1 << n];
    let mut p_absorb = vec![0.0; 1 << n];
    for s in 0..1 << n {
        if rates(s).is_empty() {
            p_absorb[s] = 1.0;
            p_plus[s] = if s == all_plus { 1.0 } else { 0.0 };
        }
    }
    for _ in 0..20_000 {
        for s in 0..1 << n {
            let r = rates(s);
            if r.is_empty() {
                continue;
            }
            let total: f64 = r.iter().map(|p| p.1).sum();
            p_plus[s] = r.iter().map(|&(t, w)| w / total * p_plus[t]).sum();
            p_absorb[s] = r.iter().map(|&(t, w)| w / total * p_absorb[t]).sum();
        }
    }
    (p_plus[start], p_absorb[start])
}

#[test]
fn ring_of_five_matches_the_exact_absorption_law() {
    let lat = TorusLattice::new(&[5]).unwrap();
    let ham = Hamiltonian::new(lat.clone(), DisorderRealization::homogeneous(&lat, 1.0, 0.0).unwrap(), SpinSpace::Ising).unwrap();
    let init = SpinConfig::from_values(SpinSpace::Ising, &[1, 1, 1, 1, -1]).unwrap();
    let start = 0b01111;
    let (p_plus, p_absorb) = ring_absorption_oracle(start);
    assert!((p_absorb - 1.0).abs() < 1e-12);
    assert!((p_plus - 0.8).abs() < 1e-9, "oracle gives {p_plus}");

    let runs = 1000;
    let mut plus = 0;
    for seed in 0..runs {
        let traj = run(&ham, FlipRule::GlauberZeroT, &init, RunParams::new(1e6, seed)).unwrap();
        assert_eq!(traj.end_reason, EndReason::Absorbed);
        let fin = traj.final_config().values();
        assert!(fin.iter().all(|&v| v == fin[0]));
        plus += usize::from(fin[0] == 1);
    }
    let frac = plus as f64 / runs as f64;
    let sd = (p_plus * (1.0 - p_plus) / runs as f64).sqrt();
    assert!((frac - p_plus).abs() < 4.0 * sd, "simulated {frac}, exact {p_plus}");
}

#[test]
fn schedulers_agree_in_law() {
    let ham = setup(&[4, 4], SpinSpace::Ising, CouplingLaw::PmJ { j: 1.0, alpha: 0.7 }, FieldLaw::Zero, 5);
    let init = init_config(ham.lattice(), SpinSpace::Ising, &InitialLaw::Lambda(0.5), 5).unwrap();
    let sample = |scheduler: Scheduler, offset: u64| -> (Vec<f64>, Vec<f64>) {
        (0..2000)
            .map(|i| {
                let params = RunParams::new(1e4, offset + i).with_scheduler(scheduler);
                let t = run(&ham, FlipRule::GlauberZeroT, &init, params).unwrap();
                let t10 = t.events.get(9).map_or(f64::INFINITY, |e| e.time);
                (t10, ham.total_energy(&t.final_config()))
            })
            .unzip()
    };
    let (ta, ea) = sample(Scheduler::ActiveSites, 0);
    let (tb, eb) = sample(Scheduler::AllSites, 1_000_000);
    let critical = 1.628 * (2.0f64 / 2000.0).sqrt();
    let d_time = two_sample_ks(ta, tb);
    let d_energy = two_sample_ks(ea, eb);
    assert!(d_time < critical, "time of tenth flip: KS {d_time} >= {critical}");
    assert!(d_energy < critical, "final energy: KS {d_energy} >= {critical}");
}

#[test]
fn potts_rules_never_raise_energy() {
    for rule in [FlipRule::GlauberZeroT, FlipRule::UniformMinimizer, FlipRule::OccupationWeighted] {
        let ham = setup(&[12, 12], SpinSpace::Potts(4), CouplingLaw::Gaussian { mean: 0.5, sd: 1.0 }, FieldLaw::Zero, 3);
        let init = init_config(ham.lattice(), SpinSpace::Potts(4), &uniform_law(SpinSpace::Potts(4)), 3).unwrap();
        // switching between two colors absent from the neighborhood costs
        // nothing, so Potts runs need not absorb even with continuous couplings
        let traj = run(&ham, rule, &init, RunParams::new(200.0, 3)).unwrap();
        assert_ne!(traj.end_reason, EndReason::EventCap, "{rule}");
        assert!(traj.events.iter().all(|e| e.delta_h <= TAU_ZERO));
    }
}

#[test]
fn uniform_minimizer_only_takes_minimizing_moves() {
    let ham = setup(&[10, 10], SpinSpace::Potts(5), CouplingLaw::Gaussian { mean: 0.0, sd: 1.0 }, FieldLaw::Zero, 9);
    let init = init_config(ham.lattice(), SpinSpace::Potts(5), &uniform_law(SpinSpace::Potts(5)), 9).unwrap();
    let traj = run(&ham, FlipRule::UniformMinimizer, &init, RunParams::new(1e5, 9)).unwrap();
    let mut config = traj.initial.clone();
    let mut all = vec![0.0; 5];
    for e in &traj.events {
        ham.delta_h_all(e.site, &config, &mut all);
        let min = all.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!((e.delta_h - min).abs() <= 1e-12);
        config.set(e.site, e.new);
    }
}

#[test]
fn doubling_window_labels() {
    let scheme = WindowScheme::new(1000.0, 4);
    let label = |dims: &[usize], coupling: CouplingLaw| {
        let trajs: Vec<Trajectory> = (0..6)
            .map(|r| {
                let ham = setup(dims, SpinSpace::Ising, coupling, FieldLaw::Zero, 100 + r);
                let init = init_config(ham.lattice(), SpinSpace::Ising, &InitialLaw::Lambda(0.5), 200 + r).unwrap();
                run(&ham, FlipRule::GlauberZeroT, &init, RunParams::new(1000.0, 300 + r)).unwrap()
            })
            .collect();
        classify_type(&trajs, &scheme)
    };
    assert_eq!(label(&[1000], CouplingLaw::Constant(1.0)).label, TypeLabel::ILike);
    assert_eq!(label(&[1000], CouplingLaw::Gaussian { mean: 0.0, sd: 1.0 }).label, TypeLabel::FLike);
    let pm = label(&[64, 64], CouplingLaw::PmJ { j: 1.0, alpha: 0.5 });
    assert_eq!(pm.label, TypeLabel::MLike, "fractions {:?}, span {}", pm.fractions, pm.span);
}
