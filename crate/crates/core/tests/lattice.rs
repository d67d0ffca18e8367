use std::sync::Arc;

use distana::model::{lattice_step, Variant};
use distana::{BorderMode, Distana, Lattice, LatticeState, MeshTopology, ModelConfig, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const VARIANTS: [Variant; 4] = [Variant::Base, Variant::V1, Variant::V2, Variant::V3];
/// (row, col) offsets in N, NE, E, SE, S, SW, W, NW order.
const OFFSETS: [(isize, isize); 8] = [(-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1)];

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

fn random_state(rng: &mut ChaCha8Rng, cfg: &ModelConfig, cells: usize) -> LatticeState {
    LatticeState {
        h: random_tensor(rng, &[cells, cfg.pk.lstm_cells], 0.8),
        c: random_tensor(rng, &[cells, cfg.pk.lstm_cells], 1.5),
        lateral: random_tensor(rng, &[cells, cfg.pk.lateral_out], 1.0),
    }
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-cell scalar evaluation of one lattice step on a zero-padded grid.
fn oracle_step(model: &Distana, h: usize, w: usize, input: &[f64], state: &LatticeState) -> (Vec<f64>, LatticeState) {
    let cfg = model.config().clone();
    let pk = &cfg.pk;
    let l = pk.lstm_cells;
    let lo = pk.lateral_out;
    let w_pre = &model.pk.w_pre;
    let w_lstm = &model.pk.w_lstm;
    let b = model.pk.b_lstm.data();
    let w_post = &model.pk.w_post;
    let at = |t: &Tensor, r: usize, c: usize| t.data()[r * t.shape()[1] + c];
    let mut out = vec![0.0; h * w];
    let mut next = LatticeState::zeros(&cfg, h * w);
    let (mut nh, mut nc, mut nl) = (vec![0.0; h * w * l], vec![0.0; h * w * l], vec![0.0; h * w * lo]);
    for r in 0..h {
        for c in 0..w {
            let cell = r * w + c;
            let neighbor = |d: usize| -> Option<usize> {
                let (rr, cc) = (r as isize + OFFSETS[d].0, c as isize + OFFSETS[d].1);
                (rr >= 0 && cc >= 0 && rr < h as isize && cc < w as isize).then(|| rr as usize * w + cc as usize)
            };
            let lateral: Vec<f64> = match cfg.variant {
                Variant::Base | Variant::V1 => {
                    let mut summed = vec![0.0; lo];
                    for d in 0..8 {
                        if let Some(n) = neighbor(d) {
                            for k in 0..lo {
                                summed[k] += state.lateral.data()[n * lo + k];
                            }
                        }
                    }
                    let w_tk = &model.tk.as_ref().unwrap().w_tk;
                    (0..pk.lateral_in)
                        .map(|j| (0..lo).map(|k| summed[k] * at(w_tk, k, j)).sum())
                        .collect()
                }
                Variant::V2 => (0..8).map(|d| neighbor(d).map_or(0.0, |n| state.lateral.data()[n])).collect(),
                Variant::V3 => (0..8)
                    .map(|d| neighbor(d).map_or(0.0, |n| state.lateral.data()[n * 8 + (d + 4) % 8]))
                    .collect(),
            };
            let mut x = vec![input[cell]];
            x.extend(lateral);
            let pre: Vec<f64> = (0..pk.pre_units)
                .map(|u| x.iter().enumerate().map(|(i, xi)| xi * at(w_pre, i, u)).sum())
                .collect();
            let mut xh = pre;
            xh.extend((0..l).map(|j| state.h.data()[cell * l + j]));
            let gate = |col: usize| -> f64 { xh.iter().enumerate().map(|(i, v)| v * at(w_lstm, i, col)).sum::<f64>() + b[col] };
            for j in 0..l {
                let i_g = sig(gate(j));
                let f_g = sig(gate(l + j));
                let g_g = gate(2 * l + j).tanh();
                let o_g = sig(gate(3 * l + j));
                let cj = f_g * state.c.data()[cell * l + j] + i_g * g_g;
                nc[cell * l + j] = cj;
                nh[cell * l + j] = o_g * cj.tanh();
            }
            let y = |col: usize| -> f64 { (0..l).map(|j| nh[cell * l + j] * at(w_post, j, col)).sum() };
            out[cell] = y(0);
            for k in 0..lo {
                nl[cell * lo + k] = y(1 + k);
            }
        }
    }
    next.h = Tensor::new(vec![h * w, l], nh).unwrap();
    next.c = Tensor::new(vec![h * w, l], nc).unwrap();
    next.lateral = Tensor::new(vec![h * w, lo], nl).unwrap();
    (out, next)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn lattice_step_matches_per_cell_oracle() {
    let (h, w) = (5, 6);
    let topo = Arc::new(MeshTopology::grid(h, w, BorderMode::ZeroPad).unwrap());
    for (seed, variant) in VARIANTS.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed as u64);
        let model = Distana::init(ModelConfig::preset(variant, 4), seed as u64).unwrap();
        let lattice = Lattice::new(model.config(), topo.clone()).unwrap();
        let state = random_state(&mut rng, model.config(), h * w);
        let input = random_tensor(&mut rng, &[h * w, 1], 1.0);
        let (out, next) = model.step(&lattice, &input, &state).unwrap();
        let (o_out, o_next) = oracle_step(&model, h, w, input.data(), &state);
        assert!(max_diff(out.data(), &o_out) < 1e-12, "{variant:?} output");
        assert!(max_diff(next.h.data(), o_next.h.data()) < 1e-12, "{variant:?} h");
        assert!(max_diff(next.c.data(), o_next.c.data()) < 1e-12, "{variant:?} c");
        assert!(max_diff(next.lateral.data(), o_next.lateral.data()) < 1e-12, "{variant:?} lateral");
    }
}

/// Moves every per-cell row of `t` by `(dr, dc)` on a periodic `h x w` grid.
fn shift(t: &Tensor, h: usize, w: usize, dr: usize, dc: usize) -> Tensor {
    let cols = t.shape()[1];
    let mut data = vec![0.0; t.numel()];
    for r in 0..h {
        for c in 0..w {
            let src = r * w + c;
            let dst = ((r + dr) % h) * w + (c + dc) % w;
            data[dst * cols..(dst + 1) * cols].copy_from_slice(&t.data()[src * cols..(src + 1) * cols]);
        }
    }
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

#[test]
fn periodic_lattice_is_shift_equivariant() {
    let (h, w) = (8, 8);
    let topo = Arc::new(MeshTopology::grid(h, w, BorderMode::Periodic).unwrap());
    for (seed, variant) in VARIANTS.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(7 + seed as u64);
        let model = Distana::init(ModelConfig::preset(variant, 4), 50 + seed as u64).unwrap();
        let lattice = Lattice::new(model.config(), topo.clone()).unwrap();
        let state = random_state(&mut rng, model.config(), h * w);
        let input = random_tensor(&mut rng, &[h * w, 1], 1.0);
        let (out, next) = model.step(&lattice, &input, &state).unwrap();
        for dr in 0..h {
            for dc in 0..w {
                let s = |t: &Tensor| shift(t, h, w, dr, dc);
                let shifted_state = LatticeState {
                    h: s(&state.h),
                    c: s(&state.c),
                    lateral: s(&state.lateral),
                };
                let (o2, n2) = model.step(&lattice, &s(&input), &shifted_state).unwrap();
                // identical op ordering per cell, so equality is bitwise
                assert_eq!(o2, s(&out), "{variant:?} shift ({dr}, {dc})");
                assert_eq!(n2.h, s(&next.h));
                assert_eq!(n2.c, s(&next.c));
                assert_eq!(n2.lateral, s(&next.lateral));
            }
        }
    }
}

fn strong_model(variant: Variant, rng: &mut ChaCha8Rng) -> Distana {
    let template = Distana::zeros(ModelConfig::preset(variant, 4)).unwrap();
    let tensors = template.tensors().iter().map(|t| random_tensor(rng, t.shape(), 1.0)).collect();
    Distana::from_tensors(template.config().clone(), tensors).unwrap()
}

#[test]
fn perturbation_spreads_one_ring_per_step() {
    let (h, w) = (15, 15);
    let centre = (7usize, 7usize);
    let topo = Arc::new(MeshTopology::grid(h, w, BorderMode::ZeroPad).unwrap());
    for (seed, variant) in VARIANTS.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(31 + seed as u64);
        // O(1) weights keep the perturbation above rounding level out to radius 5
        let model = strong_model(variant, &mut rng);
        let lattice = Lattice::new(model.config(), topo.clone()).unwrap();
        let inputs: Vec<Tensor> = (0..6).map(|_| random_tensor(&mut rng, &[h * w, 1], 1.0)).collect();
        let mut perturbed_first = inputs[0].clone();
        let mut d = perturbed_first.data().to_vec();
        d[centre.0 * w + centre.1] += 0.5;
        perturbed_first = Tensor::new(vec![h * w, 1], d).unwrap();

        let mut a = lattice.zero_state();
        let mut b = lattice.zero_state();
        for k in 1..=6usize {
            let in_b = if k == 1 { &perturbed_first } else { &inputs[k - 1] };
            let (out_a, next_a) = model.step(&lattice, &inputs[k - 1], &a).unwrap();
            let (out_b, next_b) = model.step(&lattice, in_b, &b).unwrap();
            a = next_a;
            b = next_b;
            // the perturbation enters at step 1 and lateral messages take one
            // step per ring, so after k steps it reaches Chebyshev radius k - 1
            let radius = k - 1;
            let mut reached_edge = false;
            for r in 0..h {
                for c in 0..w {
                    let cheb = r.abs_diff(centre.0).max(c.abs_diff(centre.1));
                    let cell = r * w + c;
                    let differs = out_a.data()[cell] != out_b.data()[cell]
                        || a.h.data()[cell * 4..cell * 4 + 4] != b.h.data()[cell * 4..cell * 4 + 4];
                    if cheb > radius {
                        assert!(!differs, "{variant:?} step {k}: cell ({r}, {c}) changed");
                    } else if cheb == radius && differs {
                        reached_edge = true;
                    }
                }
            }
            assert!(reached_edge, "{variant:?} step {k}: perturbation did not reach radius {radius}");
        }
    }
}

#[test]
fn tape_and_value_paths_agree() {
    let topo = Arc::new(MeshTopology::grid(4, 4, BorderMode::ZeroPad).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = Distana::init(ModelConfig::preset(Variant::V3, 4), 3).unwrap();
    let lattice = Lattice::new(model.config(), topo).unwrap();
    let state = random_state(&mut rng, model.config(), 16);
    let input = random_tensor(&mut rng, &[16, 1], 1.0);
    let (out, _) = model.step(&lattice, &input, &state).unwrap();
    let mut tape = Tape::new();
    let p = model.record(&mut tape);
    let x = tape.leaf(input);
    let s = state.record(&mut tape);
    let (pred, _) = lattice_step(&mut tape, &lattice, &p, x, &s).unwrap();
    assert_eq!(tape.value(pred).unwrap(), &out);
}
