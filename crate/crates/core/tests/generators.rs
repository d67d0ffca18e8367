use distana::wavegen::*;
use proptest::prelude::*;

/// Brute-force stencil on a zero-padded (h+2)x(w+2) array, written without
/// reference to the library's indexing.
fn oracle_ds2(cfg: &Ds2Config) -> Vec<Vec<Vec<f64>>> {
    let (h, w) = (cfg.height, cfg.width);
    let mut padded_prev = vec![vec![0.0f64; w + 2]; h + 2];
    let mut padded_curr = vec![vec![0.0f64; w + 2]; h + 2];
    for y in 0..h {
        for x in 0..w {
            let gx = (x as f64 - cfg.center.0).powi(2) / (2.0 * cfg.var_x);
            let gy = (y as f64 - cfg.center.1).powi(2) / (2.0 * cfg.var_y);
            padded_curr[y + 1][x + 1] = cfg.amplitude * (-(gx + gy)).exp();
        }
    }
    let unpad = |p: &Vec<Vec<f64>>| -> Vec<Vec<f64>> { (1..=h).map(|y| p[y][1..=w].to_vec()).collect() };
    let mut frames = vec![unpad(&padded_curr)];
    let k = cfg.c * cfg.c * cfg.dt * cfg.dt;
    for _ in 1..cfg.steps {
        let mut next = vec![vec![0.0f64; w + 2]; h + 2];
        for y in 1..=h {
            for x in 1..=w {
                let u = padded_curr[y][x];
                let uxx = (padded_curr[y][x + 1] - 2.0 * u + padded_curr[y][x - 1]) / (cfg.dx * cfg.dx);
                let uyy = (padded_curr[y + 1][x] - 2.0 * u + padded_curr[y - 1][x]) / (cfg.dy * cfg.dy);
                next[y][x] = k * (uxx + uyy) + 2.0 * u - padded_prev[y][x];
            }
        }
        padded_prev = padded_curr;
        padded_curr = next;
        frames.push(unpad(&padded_curr));
    }
    frames
}

#[test]
fn ds2_matches_brute_force_stencil() {
    let cfg = Ds2Config {
        height: 8,
        width: 8,
        steps: 40,
        center: (3.0, 4.0),
        ..Ds2Config::default()
    };
    let field = ds2_sequence(&cfg).unwrap();
    let oracle = oracle_ds2(&cfg);
    let mut worst = 0.0f64;
    for (t, frame) in oracle.iter().enumerate() {
        for (y, row) in frame.iter().enumerate() {
            for (x, v) in row.iter().enumerate() {
                worst = worst.max((field.value(t, y, x) - v).abs());
            }
        }
    }
    assert!(worst <= 1e-12, "max deviation {worst:e}");
}

#[test]
fn single_pulse_hand_example() {
    let cfg = Ds2Config {
        height: 5,
        width: 5,
        ..Ds2Config::default()
    };
    let mut curr = vec![0.0; 25];
    curr[12] = 0.34;
    let next = ds2_step(&vec![0.0; 25], &curr, &cfg).unwrap();
    assert!((next[12] - 0.5576).abs() <= 1e-12);
    for i in [7, 11, 13, 17] {
        assert!((next[i] - 0.0306).abs() <= 1e-12);
    }
    for i in [6, 8, 16, 18] {
        assert_eq!(next[i], 0.0);
    }
}

#[test]
fn ds1_matches_closed_form_per_cell() {
    let cfg = Ds1Config {
        center: (5.25, 9.5),
        ..Ds1Config::default()
    };
    let field = ds1_sequence(&cfg).unwrap();
    for t in 0..cfg.steps {
        let time = t as f64 * cfg.dt;
        for y in 0..cfg.height {
            for x in 0..cfg.width {
                let r = ((x as f64 - 5.25).powi(2) + (y as f64 - 9.5).powi(2)).sqrt();
                let expected = if r < cfg.c * time {
                    (r - cfg.c * time).sin() * (-cfg.d * (cfg.c * time - r)).exp()
                } else {
                    0.0
                };
                assert_eq!(field.value(t, y, x), expected, "t={t} y={y} x={x}");
            }
        }
    }
}

#[test]
fn ds1_coarse_step_frame_forty() {
    let cfg = Ds1Config {
        dt: 0.05,
        center: (8.0, 8.0),
        ..Ds1Config::default()
    };
    let field = ds1_sequence(&cfg).unwrap();
    let time = 40.0 * 0.05;
    for y in 0..16 {
        for x in 0..16 {
            let r = ((x as f64 - 8.0).powi(2) + (y as f64 - 8.0).powi(2)).sqrt();
            let expected = if r < 10.0 * time {
                (r - 10.0 * time).sin() * (-0.25 * (10.0 * time - r)).exp()
            } else {
                0.0
            };
            assert_eq!(field.value(40, y, x), expected);
        }
    }
}

#[test]
fn ds2_reference_constants_stay_bounded() {
    let cfg = Ds2Config {
        steps: 150,
        center: (8.0, 8.0),
        ..Ds2Config::default()
    };
    assert!((cfg.cfl_number() - 0.3).abs() < 1e-15);
    let field = ds2_sequence(&cfg).unwrap();
    assert!(field.data().iter().all(|v| v.is_finite()));
    assert!(field.max_abs() <= 1.0, "max |u| = {}", field.max_abs());
}

#[test]
fn cfl_violation_is_rejected() {
    let cfg = Ds2Config {
        c: 8.0,
        ..Ds2Config::default()
    };
    let err = ds2_sequence(&cfg).unwrap_err();
    assert!(err.to_string().contains("1/sqrt(2)"));
}

#[test]
fn datasets_regenerate_identically() {
    for kind in [DatasetKind::Ds1, DatasetKind::Ds2, DatasetKind::Ds1VariableC] {
        let spec = DatasetSpec::new(kind, 4, 2, 11);
        let a = sample_dataset(&spec).unwrap();
        let b = sample_dataset(&spec).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        assert_ne!(a.train[0], a.train[1]);
    }
}

fn frame(h: usize, w: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, h * w)
}

proptest! {
    #[test]
    fn ds2_step_is_linear(p1 in frame(6, 7), c1 in frame(6, 7), p2 in frame(6, 7), c2 in frame(6, 7), a in -2.0f64..2.0) {
        let cfg = Ds2Config { height: 6, width: 7, ..Ds2Config::default() };
        let lhs = ds2_step(
            &p1.iter().zip(&p2).map(|(x, y)| x + a * y).collect::<Vec<_>>(),
            &c1.iter().zip(&c2).map(|(x, y)| x + a * y).collect::<Vec<_>>(),
            &cfg,
        ).unwrap();
        let r1 = ds2_step(&p1, &c1, &cfg).unwrap();
        let r2 = ds2_step(&p2, &c2, &cfg).unwrap();
        for (l, (x, y)) in lhs.iter().zip(r1.iter().zip(&r2)) {
            prop_assert!((l - (x + a * y)).abs() < 1e-12);
        }
    }

    #[test]
    fn ds1_is_zero_outside_the_front(x in 0.0f64..16.0, y in 0.0f64..16.0, t in 0.0f64..0.8) {
        let cfg = Ds1Config::default();
        let r = ((x - cfg.center.0).powi(2) + (y - cfg.center.1).powi(2)).sqrt();
        let v = ds1_value(x, y, t, &cfg);
        if r >= cfg.c * t {
            prop_assert_eq!(v, 0.0);
        } else {
            prop_assert!(v.abs() <= 1.0);
        }
    }
}
