use proptest::prelude::*;
use viralfront::bvp::{self, BvpSpec, Grid, Profile};
use viralfront::equilibrium::{build_chain, solve_full_equilibrium, RightBc};
use viralfront::fbsim::{run, InitialData, RunOptions};
use viralfront::model::ModelParams;

fn r0_two() -> ModelParams {
    ModelParams::kinetic(1.0, 1.0, 2.0, 1.0, 1.0, 1.0)
}

fn fixed_step_run(n: usize, dt: f64, t_end: f64) -> viralfront::fbsim::Trajectory {
    let opts = RunOptions {
        dt: Some(dt),
        ..RunOptions::uniform(t_end, n, 1)
    };
    run(&InitialData::default(), &r0_two(), &opts).unwrap()
}

#[test]
fn boundary_position_is_first_order_in_time() {
    let h: Vec<f64> = [8e-4, 4e-4, 2e-4]
        .iter()
        .map(|&dt| fixed_step_run(100, dt, 2.0).final_record().h)
        .collect();
    let ratio = (h[0] - h[1]).abs() / (h[1] - h[2]).abs();
    assert!(ratio >= 1.8, "h(T) = {h:?}, ratio {ratio}");
}

#[test]
fn sup_norms_are_second_order_in_space() {
    let sups: Vec<[f64; 3]> = [99, 199, 399]
        .iter()
        .map(|&n| fixed_step_run(n, 1e-4, 1.0).final_record().sup)
        .collect();
    for i in 0..3 {
        let ratio = (sups[0][i] - sups[1][i]).abs() / (sups[1][i] - sups[2][i]).abs();
        assert!(ratio >= 3.5, "component {i}: sups {sups:?}, ratio {ratio}");
    }
}

#[test]
fn virus_free_run_settles_on_closed_form() {
    let p = r0_two();
    let init = InitialData::Bump {
        amplitudes: [0.5, 0.0, 0.0],
    };
    let traj = run(&init, &p, &RunOptions::uniform(60.0, 1500, 6)).unwrap();
    let s = &traj.final_state;
    assert_eq!(s.sup(1), 0.0);
    let dev = (0..=100)
        .map(|i| i as f64 * 0.1)
        .map(|x| (s.value_at(0, x) - (1.0 - (-x).exp())).abs())
        .fold(0.0, f64::max);
    assert!(dev < 1e-3, "deviation {dev}");
}

#[test]
fn full_equilibrium_lies_inside_bracket_iteration() {
    let p = r0_two();
    let chain = build_chain(&p, 10.0, 1e-6).unwrap();
    let grid = Grid::new(40.0, 399).unwrap();
    let upper = Profile::from_fn(grid, 3, |i, x| chain.upper_sample(i, x)).unwrap();
    let lower = Profile::from_fn(grid, 3, |i, x| chain.lower_sample(i, x).unwrap()).unwrap();
    let right = [upper.component(0)[400], upper.component(1)[400], upper.component(2)[400]];
    let mut lower_vals = lower.into_values();
    for (c, r) in lower_vals.iter_mut().zip(right) {
        c[400] = r;
    }
    let lower = Profile::new(grid, lower_vals).unwrap();
    let spec = BvpSpec::triple(p, grid, right).unwrap();
    let (lo, up) = bvp::monotone_bracket(&spec, &lower, &upper, 30).unwrap();
    let sol = bvp::solve_newton(&spec, &upper, 1e-10, 50).unwrap();
    for i in 0..3 {
        for j in 0..grid.len() {
            let u = sol.component(i)[j];
            assert!(u >= lo.component(i)[j] - 1e-8 && u <= up.component(i)[j] + 1e-8, "comp {i} node {j}");
        }
    }
    let half = solve_full_equilibrium(&p, 10.0, 1e-6, RightBc::Chain).unwrap();
    let dev = half
        .profile
        .grid()
        .nodes()
        .iter()
        .enumerate()
        .flat_map(|(j, &x)| (0..3).map(move |i| (i, j, x)))
        .map(|(i, j, x)| (half.profile.component(i)[j] - sol.sample(i, x)).abs())
        .fold(0.0, f64::max);
    assert!(dev < 1e-3, "deviation {dev}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn chain_is_ordered_and_annihilates_kinetics(
        b in 1.5..4.0f64,
        k in 0.8..2.0f64,
        d2 in 0.5..2.0f64,
    ) {
        let p = ModelParams::kinetic(1.0, 1.0, b, 1.0, k, 1.0).with_diffusivities(1.0, d2, 1.0);
        prop_assume!(viralfront::model::persistence_condition(&p));
        let chain = build_chain(&p, 10.0, 1e-6).unwrap();
        let (ud_le_ol, _) = chain.orderings(1e-9);
        prop_assert!(ud_le_ol);
        let ff = &chain.ol_u23.farfield;
        let scale = ff[0].max(ff[1]).max(1.0);
        prop_assert!(p.f2(chain.ol_u1.farfield[0], ff[0], ff[1]).abs() <= 1e-6 * scale);
        prop_assert!(p.f3(ff[0], ff[1]).abs() <= 1e-6 * scale);
        let ud = chain.ud_u23.as_ref().unwrap();
        prop_assert!(p.f2(chain.ud_u1.farfield[0], ud.farfield[0], ud.farfield[1]).abs() <= 1e-6 * scale);
        for c in 0..2 {
            prop_assert_eq!(viralfront::equilibrium::monotonicity_violations(&chain.ol_u23.profile, c), 0);
        }
    }
}
