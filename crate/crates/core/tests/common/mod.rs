//! Independent oracles shared by the integration tests and the acceptance run.
//!
//! Nothing here calls the solver or the tape under test except through the
//! public entry points being checked.

#![allow(dead_code)]

use rand::Rng;

/// Exact minimum of `⟨C, π⟩` over transport plans between `p` and `q`,
/// by successive shortest paths on the bipartite flow network.
pub fn lp_transport_cost(p: &[f64], q: &[f64], cost: &[f64]) -> f64 {
    let (n, m) = (p.len(), q.len());
    assert_eq!(cost.len(), n * m);
    const TINY: f64 = 1e-15;
    // Nodes: 0 source, 1..=n rows, n+1..=n+m columns, n+m+1 sink.
    let nodes = n + m + 2;
    let sink = n + m + 1;
    struct Edge {
        to: usize,
        cap: f64,
        cost: f64,
    }
    let mut edges: Vec<Edge> = Vec::new();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); nodes];
    let mut add = |edges: &mut Vec<Edge>, a: usize, b: usize, cap: f64, c: f64| {
        adj[a].push(edges.len());
        edges.push(Edge { to: b, cap, cost: c });
        adj[b].push(edges.len());
        edges.push(Edge { to: a, cap: 0.0, cost: -c });
    };
    for (i, &pi) in p.iter().enumerate() {
        add(&mut edges, 0, 1 + i, pi, 0.0);
    }
    for i in 0..n {
        for j in 0..m {
            add(&mut edges, 1 + i, 1 + n + j, f64::INFINITY, cost[i * m + j]);
        }
    }
    for (j, &qj) in q.iter().enumerate() {
        add(&mut edges, 1 + n + j, sink, qj, 0.0);
    }
    let mut total = 0.0;
    loop {
        // Bellman-Ford; residual graphs of this problem have no negative cycles.
        let mut dist = vec![f64::INFINITY; nodes];
        let mut via: Vec<Option<usize>> = vec![None; nodes];
        dist[0] = 0.0;
        for _ in 0..nodes {
            let mut changed = false;
            for a in 0..nodes {
                if dist[a] == f64::INFINITY {
                    continue;
                }
                for &e in &adj[a] {
                    let edge = &edges[e];
                    if edge.cap > TINY && dist[a] + edge.cost < dist[edge.to] - 1e-14 {
                        dist[edge.to] = dist[a] + edge.cost;
                        via[edge.to] = Some(e);
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        if dist[sink] == f64::INFINITY {
            break;
        }
        let mut push = f64::INFINITY;
        let mut v = sink;
        while let Some(e) = via[v] {
            push = push.min(edges[e].cap);
            v = edges[e ^ 1].to;
        }
        let mut v = sink;
        while let Some(e) = via[v] {
            edges[e].cap -= push;
            edges[e ^ 1].cap += push;
            total += push * edges[e].cost;
            v = edges[e ^ 1].to;
        }
    }
    total
}

/// Optimal cost between two uniform measures of equal size, by enumerating
/// every permutation (the optimum of an assignment polytope is a vertex).
pub fn brute_force_uniform_cost(n: usize, cost: &[f64]) -> f64 {
    assert!(n <= 8 && cost.len() == n * n);
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    permute(&mut perm, 0, cost, n, &mut best);
    best / n as f64
}

fn permute(perm: &mut Vec<usize>, k: usize, cost: &[f64], n: usize, best: &mut f64) {
    if k == n {
        let c: f64 = perm.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
        *best = best.min(c);
        return;
    }
    for i in k..n {
        perm.swap(k, i);
        permute(perm, k + 1, cost, n, best);
        perm.swap(k, i);
    }
}

/// Squared Euclidean costs between two random point clouds in the unit square.
pub fn random_cloud_cost<R: Rng>(rng: &mut R, n: usize, m: usize) -> Vec<f64> {
    let xs: Vec<(f64, f64)> = (0..n).map(|_| (rng.random(), rng.random())).collect();
    let ys: Vec<(f64, f64)> = (0..m).map(|_| (rng.random(), rng.random())).collect();
    xs.iter()
        .flat_map(|a| ys.iter().map(move |b| (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)))
        .collect()
}

/// Random probability vector with entries bounded away from zero.
pub fn random_simplex<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

/// `‖a − b‖∞ / max(‖b‖∞, floor)`
pub fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff = analytic.iter().zip(numeric).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let scale = numeric.iter().map(|b| b.abs()).fold(floor, f64::max);
    diff / scale
}

/// Central differences of `f` at `x` with step `h`.
pub fn central_difference(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Outcome of solving many small random problems against the LP oracle.
#[derive(Debug)]
pub struct OtSuite {
    pub problems: usize,
    pub converged: usize,
    /// Problems whose entropic plan cost fell below the LP optimum by more
    /// than its marginal violation can explain.
    pub below_lp: usize,
    pub max_relative_gap: f64,
    pub max_marginal_error: f64,
}

/// Squared-distance problems with at most 16 support points per side:
/// random point clouds, plus pixel grids of at most 4×4 every fourth draw.
/// Each is solved at ε = 1% of the median cost.
pub fn ot_suite(seed: u64, problems: usize) -> OtSuite {
    use icc_core::loss::{sinkhorn, CostMatrix, TransportProblem};
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = OtSuite { problems, converged: 0, below_lp: 0, max_relative_gap: 0.0, max_marginal_error: 0.0 };
    for k in 0..problems {
        let (cost, dense) = if k % 4 == 3 {
            let (h, w) = (rng.random_range(2..=4), rng.random_range(2..=4));
            let c = CostMatrix::grid(h, w);
            let n = h * w;
            let dense: Vec<f64> = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| c.get(i, j)).collect();
            (c, dense)
        } else {
            let (n, m) = (rng.random_range(2..=16), rng.random_range(2..=16));
            let dense = random_cloud_cost(&mut rng, n, m);
            (CostMatrix::dense(n, m, dense.clone()).unwrap(), dense)
        };
        let p = random_simplex(&mut rng, cost.rows());
        let q = random_simplex(&mut rng, cost.cols());
        let lp = lp_transport_cost(&p, &q, &dense);
        let epsilon = 0.01 * cost.median();
        let max_cost = dense.iter().copied().fold(0.0, f64::max);
        let problem = TransportProblem { epsilon, max_iters: 50_000, ..TransportProblem::new(p, q, cost) };
        let plan = sinkhorn(&problem).unwrap();
        let violation = plan.row_error + plan.col_error;
        if plan.cost < lp - max_cost * violation - 1e-12 {
            out.below_lp += 1;
        }
        out.max_relative_gap = out.max_relative_gap.max((plan.cost - lp) / lp);
        if plan.converged {
            out.converged += 1;
            out.max_marginal_error = out.max_marginal_error.max(plan.row_error.max(plan.col_error));
        }
    }
    out
}

/// Relative error tolerance for smooth tape ops and losses at 64-bit.
pub const GRAD_TOL: f64 = 1e-4;
/// Relative error tolerance for the transport loss.
pub const OT_GRAD_TOL: f64 = 1e-3;
const FD_STEP: f64 = 1e-6;

type Build = dyn Fn(&mut icc_core::autodiff::Tape<f64>, &[usize]) -> icc_core::Result<usize>;

/// Compares the tape gradient of `Σ w ⊙ build(inputs)` with central
/// differences, over every coordinate of every input.
pub fn tape_gradient_error(inputs: &[icc_core::Tensor<f64>], weight_seed: u64, build: &Build) -> f64 {
    use icc_core::autodiff::Tape;
    use icc_core::Tensor;
    use rand::SeedableRng;
    let scalar = |xs: &[Tensor<f64>]| -> (Tape<f64>, usize) {
        let mut tape = Tape::new();
        let ids: Vec<usize> = xs.iter().enumerate().map(|(i, x)| tape.param(format!("x{i}"), x.clone()).unwrap()).collect();
        let out = build(&mut tape, &ids).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(weight_seed);
        let w = Tensor::uniform(tape.value(out).shape().to_vec(), -1.0, 1.0, &mut rng);
        let w = tape.input(w).unwrap();
        let prod = tape.mul(out, w).unwrap();
        let loss = tape.sum(prod).unwrap();
        (tape, loss)
    };
    let (tape, loss) = scalar(inputs);
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.param(&format!("x{i}")).map(|g| g.to_f64_vec()).unwrap_or_else(|| vec![0.0; x.len()]);
        let numeric = central_difference(&x.to_f64_vec(), FD_STEP, |probe| {
            let mut xs = inputs.to_vec();
            xs[i] = Tensor::from_f64(x.shape().to_vec(), probe).unwrap();
            let (t, l) = scalar(&xs);
            t.value(l).data()[0]
        });
        worst = worst.max(relative_error(&analytic, &numeric, 1e-6));
    }
    worst
}

/// `(name, relative error, tolerance)` for every differentiable op and loss.
pub fn gradient_suite(seed: u64) -> Vec<(String, f64, f64)> {
    use icc_core::density::DensityMap;
    use icc_core::loss::{counting_loss, dm_count_loss, ot_loss, tv_loss, DmCountWeights, LossValue, OtSettings};
    use icc_core::ops::{ConvGeometry, Mode, PoolGeometry, UpsampleMethod, BN_EPS};
    use icc_core::Tensor;
    use rand::SeedableRng;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut t = |shape: &[usize], lo: f64, hi: f64| Tensor::<f64>::uniform(shape.to_vec(), lo, hi, &mut rng);
    let x = t(&[2, 3, 6, 6], -1.0, 1.0);
    let y = t(&[2, 3, 6, 6], -1.0, 1.0);
    let pos = t(&[2, 3, 6, 6], 0.5, 2.0);
    let k3 = t(&[4, 3, 3, 3], -0.5, 0.5);
    let k17 = t(&[2, 3, 1, 5], -0.5, 0.5);
    let bias = t(&[4], -0.5, 0.5);
    let gamma = t(&[3], 0.5, 1.5);
    let beta = t(&[3], -0.5, 0.5);
    let small = t(&[1, 2, 3, 3], -1.0, 1.0);
    let rm = [0.1, -0.2, 0.05];
    let rv = [0.9, 1.3, 0.7];

    let mut out = Vec::new();
    let mut case = |name: &str, inputs: Vec<Tensor<f64>>, build: &Build| {
        out.push((name.to_string(), tape_gradient_error(&inputs, 7, build), GRAD_TOL));
    };
    case("conv2d stride 2 pad 1 with bias", vec![x.clone(), k3.clone(), bias.clone()], &|tp, v| {
        tp.conv2d(v[0], v[1], Some(v[2]), ConvGeometry::new((2, 2), (1, 1)))
    });
    case("conv2d 1x5 same", vec![x.clone(), k17.clone()], &|tp, v| tp.conv2d(v[0], v[1], None, ConvGeometry::same(1, 5)));
    case("batchnorm train", vec![x.clone(), gamma.clone(), beta.clone()], &|tp, v| {
        tp.batchnorm(v[0], v[1], v[2], &[0.0; 3], &[1.0; 3], Mode::Train, BN_EPS)
    });
    case("batchnorm eval", vec![x.clone(), gamma.clone(), beta.clone()], &move |tp, v| {
        tp.batchnorm(v[0], v[1], v[2], &rm, &rv, Mode::Eval, BN_EPS)
    });
    case("relu", vec![x.clone()], &|tp, v| tp.relu(v[0]));
    case("sigmoid", vec![x.clone()], &|tp, v| tp.sigmoid(v[0]));
    case("maxpool 3x3 s2 p1", vec![x.clone()], &|tp, v| tp.maxpool(v[0], PoolGeometry::square(3, 2, 1)));
    case("avgpool 3x3 s1 p1", vec![x.clone()], &|tp, v| tp.avgpool(v[0], PoolGeometry::square(3, 1, 1)));
    case("adaptive avgpool 6x6 to 4x5", vec![x.clone()], &|tp, v| tp.adaptive_avgpool(v[0], 4, 5));
    case("bilinear upsample x2", vec![small.clone()], &|tp, v| tp.upsample(v[0], 2, UpsampleMethod::Bilinear));
    case("nearest upsample x2", vec![small.clone()], &|tp, v| tp.upsample(v[0], 2, UpsampleMethod::Nearest));
    case("bilinear resize 3x3 to 5x4", vec![small.clone()], &|tp, v| tp.resize_bilinear(v[0], 5, 4));
    case("concat", vec![x.clone(), small.clone().reshape([1, 2, 3, 3]).unwrap(), y.clone()], &|tp, v| {
        let a = tp.avgpool(v[0], PoolGeometry::square(2, 2, 0))?;
        let c = tp.avgpool(v[2], PoolGeometry::square(2, 2, 0))?;
        let b = tp.concat(&[v[1], v[1]])?;
        let b = tp.channel_sum(b)?;
        let b2 = tp.concat(&[b, b])?;
        let top = tp.concat(&[a, c])?;
        let joined = tp.concat(&[b2, b2, b2])?;
        let s = tp.sum(joined)?;
        let ts = tp.sum(top)?;
        tp.add(s, ts)
    });
    case("channel sum", vec![x.clone()], &|tp, v| tp.channel_sum(v[0]));
    case("add", vec![x.clone(), y.clone()], &|tp, v| tp.add(v[0], v[1]));
    case("sub", vec![x.clone(), y.clone()], &|tp, v| tp.sub(v[0], v[1]));
    case("mul", vec![x.clone(), y.clone()], &|tp, v| tp.mul(v[0], v[1]));
    case("div", vec![x.clone(), pos.clone()], &|tp, v| tp.div(v[0], v[1]));
    case("add scalar", vec![x.clone()], &|tp, v| tp.add_scalar(v[0], 0.7));
    case("mul scalar", vec![x.clone()], &|tp, v| tp.mul_scalar(v[0], -1.3));
    case("sum", vec![x.clone()], &|tp, v| tp.sum(v[0]));

    // Losses on 6×6 maps with their hand-written gradients.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let gt: Vec<f64> = (0..36).map(|_| if rng.random_bool(0.4) { rng.random_range(0.0..2.0) } else { 0.0 }).collect();
    let pred: Vec<f64> = (0..36).map(|_| rng.random_range(0.1..1.0)).collect();
    let y = DensityMap::new(6, 6, gt, true).unwrap();
    let settings = OtSettings { epsilon: None, max_iters: 100, tolerance: 0.0 };
    let map = |v: &[f64]| DensityMap::new(6, 6, v.to_vec(), false).unwrap();
    let mut loss_case = |name: &str, tol: f64, f: &dyn Fn(&DensityMap) -> LossValue| {
        let analytic = f(&map(&pred)).grad;
        let numeric = central_difference(&pred, FD_STEP, |probe| f(&map(probe)).value);
        out.push((name.to_string(), relative_error(&analytic, &numeric, 1e-6), tol));
    };
    loss_case("counting loss", GRAD_TOL, &|m| counting_loss(&y, m).unwrap());
    loss_case("tv loss", GRAD_TOL, &|m| tv_loss(&y, m).unwrap());
    loss_case("ot loss", OT_GRAD_TOL, &|m| ot_loss(&y, m, settings).unwrap());
    loss_case("combined loss", OT_GRAD_TOL, &|m| {
        let l = dm_count_loss(&y, m, DmCountWeights::default(), settings).unwrap();
        LossValue { value: l.total, grad: l.grad }
    });
    out
}

/// Rasterizes random point sets and downsamples by 8, comparing every output
/// cell with a direct count of the points in its 8×8 block. Returns the
/// number of sets with any mismatch.
pub fn count_conservation(seed: u64, sets: usize) -> usize {
    use icc_core::data::{downsample_by_8, rasterize, Point};
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    for s in 0..sets {
        let (h, w) = (rng.random_range(1..=96), rng.random_range(1..=96));
        let n = rng.random_range(0..=200);
        let points: Vec<Point> = (0..n)
            .map(|_| {
                // Some points sit exactly on pixel corners or just inside the far edge.
                match rng.random_range(0..4) {
                    0 => Point { x: rng.random_range(0..w) as f64, y: rng.random_range(0..h) as f64 },
                    1 => Point { x: w as f64 - 1e-9, y: h as f64 - 1e-9 },
                    _ => Point { x: rng.random_range(0.0..w as f64), y: rng.random_range(0.0..h as f64) },
                }
            })
            .collect();
        let map = downsample_by_8(&rasterize(&points, h, w, &format!("set{s}")).unwrap());
        let (oh, ow) = (h.div_ceil(8), w.div_ceil(8));
        let mut expected = vec![0.0; oh * ow];
        for p in &points {
            expected[(p.y as usize / 8) * ow + p.x as usize / 8] += 1.0;
        }
        if (map.height(), map.width()) != (oh, ow) || map.values() != expected.as_slice() || map.count() != n as f64 {
            failures += 1;
        }
    }
    failures
}
