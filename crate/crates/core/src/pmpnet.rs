//! Pillar message passing: per-point embedding with a masked max, a fixed
//! k-NN graph over pillar centroids, and S rounds of edge messages followed by
//! a dense GRU node update.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::pointcloud::{PillarSet, POINT_DIM};
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PmpConfig {
    /// Node state width L.
    pub state_dim: usize,
    /// Message width L'.
    pub message_dim: usize,
    /// Message-passing iterations S; 0 gives a plain pillar feature net.
    pub steps: usize,
    /// Neighbors per node K.
    pub k: usize,
}

impl Default for PmpConfig {
    fn default() -> Self {
        Self {
            state_dim: 64,
            message_dim: 64,
            steps: 3,
            k: 8,
        }
    }
}

pub fn init_params(store: &mut ParamStore, cfg: &PmpConfig, rng: &mut ChaCha8Rng) {
    let (l, lm) = (cfg.state_dim, cfg.message_dim);
    store.uniform("pmpnet.pfn.w", &[POINT_DIM, l], POINT_DIM, rng);
    store.zeros("pmpnet.pfn.b", &[l]);
    store.uniform("pmpnet.msg.w", &[2 * l, lm], 2 * l, rng);
    store.zeros("pmpnet.msg.b", &[lm]);
    for g in ["z", "r", "h"] {
        store.uniform(&format!("pmpnet.gru.w{g}"), &[lm, l], lm, rng);
        store.uniform(&format!("pmpnet.gru.u{g}"), &[l, l], l, rng);
        store.zeros(&format!("pmpnet.gru.b{g}"), &[l]);
    }
}

/// Directed k-NN graph: row `i` of `neighbors` lists the K nodes whose
/// messages flow into node `i`, nearest first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PillarGraph {
    pub k: usize,
    pub neighbors: Vec<usize>,
}

impl PillarGraph {
    pub fn nodes(&self) -> usize {
        self.neighbors.len() / self.k.max(1)
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.neighbors[i * self.k..(i + 1) * self.k]
    }
}

/// K nearest centroids per node in the x-y plane; equal distances resolve to
/// the lower index and a node is never its own neighbor.
pub fn build_knn(centroids: &[[f64; 2]], k: usize) -> Result<PillarGraph> {
    let n = centroids.len();
    if k == 0 || n <= k {
        return Err(Error::Config(format!("k-NN with K = {k} needs more than K nodes, got {n}")));
    }
    let mut neighbors = Vec::with_capacity(n * k);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for (i, a) in centroids.iter().enumerate() {
        cand.clear();
        cand.extend(centroids.iter().enumerate().filter(|&(j, _)| j != i).map(|(j, b)| {
            let (dx, dy) = (a[0] - b[0], a[1] - b[1]);
            (dx * dx + dy * dy, j)
        }));
        let cmp = |x: &(f64, usize), y: &(f64, usize)| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1));
        if cand.len() > k {
            cand.select_nth_unstable_by(k - 1, cmp);
            cand.truncate(k);
        }
        cand.sort_unstable_by(cmp);
        neighbors.extend(cand.iter().map(|c| c.1));
    }
    Ok(PillarGraph { k, neighbors })
}

/// Initial node states: per-point linear map D→L, masked max over the point
/// slots. Output V×L.
pub fn pfn_init<T: Real>(tape: &mut Tape<T>, p: &Bound, pillars: &PillarSet) -> Result<Var> {
    let v = pillars.len();
    if pillars.is_empty() {
        return Err(Error::InvalidInput("pillar feature net on an empty pillar set".into()));
    }
    let n = pillars.max_points;
    let w = p.get("pmpnet.pfn.w")?;
    let l = tape.shape(w)[1];
    let pts = tape.constant(pillars.buffers.cast::<T>().reshape(&[v * n, POINT_DIM])?);
    let y = tape.matmul(pts, w)?;
    let y = tape.add_bias(y, p.get("pmpnet.pfn.b")?, 1)?;
    let y = tape.reshape(y, &[v, n, l])?;
    let mask: Vec<bool> = pillars.point_mask.iter().flat_map(|&m| std::iter::repeat(m).take(l)).collect();
    tape.max_axis(y, 1, Some(&mask))
}

/// One round of messages: m_i = max_j φ([h_i, h_j − h_i]) over the in-neighbors j.
pub fn message_pass_step<T: Real>(tape: &mut Tape<T>, p: &Bound, graph: &PillarGraph, h: Var) -> Result<Var> {
    let (v, k) = (graph.nodes(), graph.k);
    if tape.shape(h)[0] != v {
        return Err(Error::Shape(format!("graph has {v} nodes, states {:?}", tape.shape(h))));
    }
    let self_idx: Vec<usize> = (0..v).flat_map(|i| std::iter::repeat(i).take(k)).collect();
    let hi = tape.gather_rows(h, &self_idx)?;
    let hj = tape.gather_rows(h, &graph.neighbors)?;
    let e = tape.sub(hj, hi)?;
    let cat = tape.concat(&[hi, e], 1)?;
    let m = tape.matmul(cat, p.get("pmpnet.msg.w")?)?;
    let m = tape.add_bias(m, p.get("pmpnet.msg.b")?, 1)?;
    let lm = tape.shape(m)[1];
    let m = tape.reshape(m, &[v, k, lm])?;
    tape.max_axis(m, 1, None)
}

/// Dense GRU: h' = (1 − z)∘h + z∘h̃.
pub fn node_update<T: Real>(tape: &mut Tape<T>, p: &Bound, h: Var, m: Var) -> Result<Var> {
    let gate = |tape: &mut Tape<T>, g: &str, state: Var| -> Result<Var> {
        let a = tape.matmul(m, p.get(&format!("pmpnet.gru.w{g}"))?)?;
        let b = tape.matmul(state, p.get(&format!("pmpnet.gru.u{g}"))?)?;
        let s = tape.add(a, b)?;
        tape.add_bias(s, p.get(&format!("pmpnet.gru.b{g}"))?, 1)
    };
    let z = gate(tape, "z", h)?;
    let z = tape.sigmoid(z);
    let r = gate(tape, "r", h)?;
    let r = tape.sigmoid(r);
    let rh = tape.mul(r, h)?;
    let cand = gate(tape, "h", rh)?;
    let cand = tape.tanh(cand);
    let delta = tape.sub(cand, h)?;
    let step = tape.mul(z, delta)?;
    tape.add(h, step)
}

/// Runs `steps` message/update rounds from states `h0`.
pub fn propagate<T: Real>(tape: &mut Tape<T>, p: &Bound, graph: &PillarGraph, h0: Var, steps: usize) -> Result<Var> {
    let mut h = h0;
    for _ in 0..steps {
        let m = message_pass_step(tape, p, graph, h)?;
        h = node_update(tape, p, h, m)?;
    }
    Ok(h)
}

/// Builds the graph for `pillars` when `cfg` needs one.
pub fn graph_for(pillars: &PillarSet, cfg: &PmpConfig) -> Result<Option<PillarGraph>> {
    if cfg.steps == 0 || pillars.is_empty() {
        return Ok(None);
    }
    build_knn(&pillars.centroids, cfg.k).map(Some)
}

/// Full frame encoding scattered to an L×H×W canvas. `graph` must come from
/// [`graph_for`] on the same pillars.
pub fn encode_frame<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    pillars: &PillarSet,
    graph: Option<&PillarGraph>,
    cfg: &PmpConfig,
) -> Result<Var> {
    let (h, w) = (pillars.grid_h, pillars.grid_w);
    if pillars.is_empty() {
        let l = tape.shape(p.get("pmpnet.pfn.w")?)[1];
        return Ok(tape.constant(Tensor::zeros(&[l, h, w])));
    }
    let mut states = pfn_init(tape, p, pillars)?;
    if cfg.steps > 0 {
        let graph = graph.ok_or_else(|| Error::Config("message passing needs a k-NN graph".into()))?;
        if graph.nodes() != pillars.len() || graph.k != cfg.k {
            return Err(Error::Config("k-NN graph does not match the pillar set".into()));
        }
        states = propagate(tape, p, graph, states, cfg.steps)?;
    }
    tape.scatter_rows(states, &pillars.coords, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{max_relative_error, project, random_tensor, DEFAULT_EPS};
    use crate::pointcloud::{pillarize, PillarConfig};
    use crate::pointcloud::{Frame, LidarPoint, Pose};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use std::collections::VecDeque;

    fn small_cfg(l: usize, lm: usize, steps: usize, k: usize) -> PmpConfig {
        PmpConfig {
            state_dim: l,
            message_dim: lm,
            steps,
            k,
        }
    }

    fn store(cfg: &PmpConfig, seed: u64) -> ParamStore {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_params(&mut s, cfg, &mut rng);
        // non-zero biases so the oracles exercise them
        for name in ["pmpnet.pfn.b", "pmpnet.msg.b", "pmpnet.gru.bz", "pmpnet.gru.br", "pmpnet.gru.bh"] {
            let shape = s.get(name).unwrap().shape().to_vec();
            s.uniform(name, &shape, 4, &mut rng);
        }
        s
    }

    fn random_frame(n: usize, seed: u64) -> Frame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points = (0..n)
            .map(|_| {
                LidarPoint::new(
                    rng.gen_range(-4.0..4.0),
                    rng.gen_range(-4.0..4.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(0.0..1.0),
                    0.0,
                )
            })
            .collect();
        Frame {
            points,
            pose: Pose::identity(),
            timestamp: 0.0,
        }
    }

    fn pillar_cfg() -> PillarConfig {
        PillarConfig {
            x_range: (-4.0, 4.0),
            y_range: (-4.0, 4.0),
            pillar_size: 1.0,
            max_points: 4,
            ..PillarConfig::desk()
        }
    }

    fn knn_exhaustive(c: &[[f64; 2]], k: usize) -> Vec<usize> {
        let mut out = vec![];
        for i in 0..c.len() {
            let mut all: Vec<(f64, usize)> = (0..c.len())
                .filter(|&j| j != i)
                .map(|j| ((c[i][0] - c[j][0]).powi(2) + (c[i][1] - c[j][1]).powi(2), j))
                .collect();
            all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            out.extend(all[..k].iter().map(|a| a.1));
        }
        out
    }

    #[test]
    fn knn_collinear_tie_rule() {
        let g = build_knn(&[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]], 1).unwrap();
        assert_eq!(g.neighbors, vec![1, 0, 1]);
        let g = build_knn(&[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]], 2).unwrap();
        assert_eq!(g.neighbors, vec![1, 2, 0, 2, 1, 0]);
        assert!(matches!(build_knn(&[[0.0, 0.0], [1.0, 0.0]], 2), Err(Error::Config(_))));
    }

    #[test]
    fn knn_matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c: Vec<[f64; 2]> = (0..500).map(|_| [rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0)]).collect();
        for k in [1, 8, 16] {
            assert_eq!(build_knn(&c, k).unwrap().neighbors, knn_exhaustive(&c, k));
        }
        // integer grid: many exact ties
        let grid: Vec<[f64; 2]> = (0..64).map(|i| [(i % 8) as f64, (i / 8) as f64]).collect();
        assert_eq!(build_knn(&grid, 8).unwrap().neighbors, knn_exhaustive(&grid, 8));
    }

    proptest! {
        #[test]
        fn knn_rows_are_valid(pts in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 3..40), k in 1usize..3) {
            let c: Vec<[f64; 2]> = pts.iter().map(|&(x, y)| [x, y]).collect();
            let g = build_knn(&c, k).unwrap();
            for i in 0..c.len() {
                let row = g.row(i);
                prop_assert_eq!(row.len(), k);
                prop_assert!(row.iter().all(|&j| j != i && j < c.len()));
                let mut u = row.to_vec();
                u.dedup();
                prop_assert_eq!(u.len(), k);
            }
        }
    }

    #[test]
    fn pfn_matches_point_loop() {
        let cfg = small_cfg(6, 6, 0, 2);
        let s = store(&cfg, 1);
        let ps = pillarize(&random_frame(80, 2), &pillar_cfg()).unwrap();
        let mut tape = Tape::<f64>::new();
        let p = s.bind(&mut tape);
        let h = pfn_init(&mut tape, &p, &ps).unwrap();
        let (w, b) = (s.get("pmpnet.pfn.w").unwrap(), s.get("pmpnet.pfn.b").unwrap());
        let n = ps.max_points;
        for i in 0..ps.len() {
            for c in 0..6 {
                let mut best = f64::NEG_INFINITY;
                for slot in 0..ps.counts[i] {
                    let at = (i * n + slot) * POINT_DIM;
                    let f = &ps.buffers.data()[at..at + POINT_DIM];
                    let y: f64 = (0..POINT_DIM).map(|d| f[d] as f64 * w.get(&[d, c]) as f64).sum::<f64>() + b.data()[c] as f64;
                    best = best.max(y);
                }
                assert!((tape.value(h).get(&[i, c]) - best).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pfn_single_point_and_duplicates() {
        let cfg = small_cfg(4, 4, 0, 1);
        let s = store(&cfg, 3);
        let pt = LidarPoint::new(0.3, -0.6, 0.2, 0.9, 0.0);
        let single = Frame {
            points: vec![pt],
            pose: Pose::identity(),
            timestamp: 0.0,
        };
        let mut doubled = random_frame(0, 0);
        doubled.points = vec![pt, LidarPoint::new(0.4, -0.7, -0.5, 0.1, 0.0)];
        let mut quad = doubled.clone();
        quad.points.extend(doubled.points.clone());
        let enc = |f: &Frame| {
            let ps = pillarize(f, &pillar_cfg()).unwrap();
            let mut tape = Tape::<f64>::new();
            let p = s.bind(&mut tape);
            let h = pfn_init(&mut tape, &p, &ps).unwrap();
            tape.value(h).clone()
        };
        let w = s.get("pmpnet.pfn.w").unwrap().cast::<f64>();
        let b = s.get("pmpnet.pfn.b").unwrap().cast::<f64>();
        let f = pt.features();
        let h = enc(&single);
        for c in 0..4 {
            let y: f64 = (0..POINT_DIM).map(|d| f[d] as f64 * w.get(&[d, c])).sum::<f64>() + b.data()[c];
            assert!((h.get(&[0, c]) - y).abs() < 1e-12);
        }
        assert_eq!(enc(&doubled), enc(&quad));
    }

    fn message_oracle(s: &ParamStore, g: &PillarGraph, h: &Tensor<f64>) -> Vec<Vec<f64>> {
        let w = s.get("pmpnet.msg.w").unwrap().cast::<f64>();
        let b = s.get("pmpnet.msg.b").unwrap().cast::<f64>();
        let (l, lm) = (h.shape()[1], w.shape()[1]);
        (0..g.nodes())
            .map(|i| {
                (0..lm)
                    .map(|c| {
                        g.row(i)
                            .iter()
                            .map(|&j| {
                                let mut acc = b.data()[c];
                                for d in 0..l {
                                    let hi = h.get(&[i, d]);
                                    acc += hi * w.get(&[d, c]) + (h.get(&[j, d]) - hi) * w.get(&[l + d, c]);
                                }
                                acc
                            })
                            .fold(f64::NEG_INFINITY, f64::max)
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn message_step_matches_edge_loop() {
        let cfg = small_cfg(5, 7, 1, 3);
        let s = store(&cfg, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c: Vec<[f64; 2]> = (0..10).map(|_| [rng.gen_range(0.0..5.0), rng.gen_range(0.0..5.0)]).collect();
        let g = build_knn(&c, 3).unwrap();
        let h0 = random_tensor(&[10, 5], -1.0, 1.0, &mut rng);
        let mut tape = Tape::<f64>::new();
        let p = s.bind(&mut tape);
        let hv = tape.constant(h0.clone());
        let m = message_pass_step(&mut tape, &p, &g, hv).unwrap();
        let want = message_oracle(&s, &g, &h0);
        for (i, row) in want.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                assert!((tape.value(m).get(&[i, c]) - v).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn identical_states_give_identical_messages() {
        let cfg = small_cfg(4, 4, 1, 2);
        let s = store(&cfg, 7);
        let g = build_knn(&[[0.0, 0.0], [1.0, 0.5], [3.0, 1.0], [2.0, 2.0]], 2).unwrap();
        let mut tape = Tape::<f64>::new();
        let p = s.bind(&mut tape);
        let row = [0.3, -0.2, 0.8, 0.1];
        let h = tape.constant(Tensor::from_f64(&[4, 4], &row.repeat(4)).unwrap());
        let m = message_pass_step(&mut tape, &p, &g, h).unwrap();
        let d = tape.value(m).data();
        for i in 1..4 {
            assert_eq!(&d[i * 4..i * 4 + 4], &d[..4]);
        }
    }

    #[test]
    fn zero_gru_halves_state() {
        let cfg = small_cfg(3, 3, 1, 1);
        let mut s = store(&cfg, 8);
        for g in ["z", "r", "h"] {
            for kind in ["w", "u", "b"] {
                let name = format!("pmpnet.gru.{kind}{g}");
                let shape = s.get(&name).unwrap().shape().to_vec();
                s.zeros(&name, &shape);
            }
        }
        let mut tape = Tape::<f64>::new();
        let p = s.bind(&mut tape);
        let h = tape.constant(Tensor::from_f64(&[2, 3], &[1.0, -2.0, 0.5, 4.0, 0.0, -1.0]).unwrap());
        let m = tape.constant(random_tensor(&[2, 3], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1)));
        let out = node_update(&mut tape, &p, h, m).unwrap();
        assert_eq!(tape.value(out).data(), &[0.5, -1.0, 0.25, 2.0, 0.0, -0.5]);
    }

    #[test]
    fn node_update_gradient() {
        let cfg = small_cfg(4, 3, 1, 1);
        let s = store(&cfg, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let ins = [random_tensor(&[5, 4], -1.0, 1.0, &mut rng), random_tensor(&[5, 3], -1.0, 1.0, &mut rng)];
        let e = max_relative_error(&ins, DEFAULT_EPS, |t, v| {
            let p = s.bind(t);
            let h = node_update(t, &p, v[0], v[1])?;
            project(t, h, 2)
        })
        .unwrap();
        assert!(e <= 1e-6, "{e}");
    }

    /// Hop distance from `src` to `dst` along message edges (j → i for j in row i).
    fn hops(g: &PillarGraph, src: usize, dst: usize) -> Option<usize> {
        let n = g.nodes();
        let mut dist = vec![usize::MAX; n];
        dist[src] = 0;
        let mut q = VecDeque::from([src]);
        while let Some(u) = q.pop_front() {
            for i in 0..n {
                if g.row(i).contains(&u) && dist[i] == usize::MAX {
                    dist[i] = dist[u] + 1;
                    q.push_back(i);
                }
            }
        }
        (dist[dst] != usize::MAX).then_some(dist[dst])
    }

    #[test]
    fn receptive_field_is_the_s_hop_neighborhood() {
        let cfg = small_cfg(8, 8, 2, 2);
        let c: Vec<[f64; 2]> = (0..10).map(|i| [i as f64, 0.0]).collect();
        let g = build_knn(&c, 2).unwrap();
        let s = store(&cfg, 11);
        let h0 = random_tensor(&[10, 8], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(12));
        let run = |h: &Tensor<f64>| {
            let mut tape = Tape::<f64>::new();
            let p = s.bind(&mut tape);
            let hv = tape.constant(h.clone());
            let out = propagate(&mut tape, &p, &g, hv, 2).unwrap();
            tape.value(out).clone()
        };
        let base = run(&h0);
        let v = 5;
        for u in 0..10 {
            let mut h = h0.clone();
            for d in 0..8 {
                let at = h.offset(&[u, d]);
                h.data_mut()[at] += 0.5;
            }
            let out = run(&h);
            let delta = (0..8).map(|d| (out.get(&[v, d]) - base.get(&[v, d])).abs()).fold(0.0, f64::max);
            match hops(&g, u, v) {
                Some(d) if d <= 2 => assert!(delta > 0.0, "node {u} at {d} hops"),
                _ => assert_eq!(delta, 0.0, "node {u}"),
            }
        }
    }

    #[test]
    fn empty_frame_encodes_to_zero_canvas() {
        let cfg = small_cfg(4, 4, 2, 2);
        let s = store(&cfg, 13);
        let ps = pillarize(&random_frame(0, 0), &pillar_cfg()).unwrap();
        let mut tape = Tape::<f32>::new();
        let p = s.bind(&mut tape);
        let c = encode_frame(&mut tape, &p, &ps, None, &cfg).unwrap();
        assert_eq!(tape.shape(c), &[4, 8, 8]);
        assert!(tape.value(c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn canvas_nonzero_only_at_pillars_and_s0_is_pfn_scatter() {
        let cfg0 = small_cfg(4, 4, 0, 3);
        let s = store(&cfg0, 14);
        let ps = pillarize(&random_frame(60, 15), &pillar_cfg()).unwrap();
        let mut tape = Tape::<f64>::new();
        let p = s.bind(&mut tape);
        let c0 = encode_frame(&mut tape, &p, &ps, None, &cfg0).unwrap();
        let h = pfn_init(&mut tape, &p, &ps).unwrap();
        let direct = tape.scatter_rows(h, &ps.coords, 8, 8).unwrap();
        assert_eq!(tape.value(c0), tape.value(direct));

        let cfg = PmpConfig { steps: 2, ..cfg0 };
        let g = graph_for(&ps, &cfg).unwrap();
        let c = encode_frame(&mut tape, &p, &ps, g.as_ref(), &cfg).unwrap();
        let occupied: std::collections::HashSet<_> = ps.coords.iter().copied().collect();
        let v = tape.value(c);
        for r in 0..8 {
            for col in 0..8 {
                if !occupied.contains(&(r, col)) {
                    assert!((0..4).all(|ch| v.get(&[ch, r, col]) == 0.0));
                }
            }
        }
    }

    #[test]
    fn canvas_invariant_to_pillar_order() {
        let cfg = small_cfg(4, 5, 2, 3);
        let s = store(&cfg, 16);
        let ps = pillarize(&random_frame(70, 17), &pillar_cfg()).unwrap();
        let n = ps.len();
        let perm: Vec<usize> = (0..n).rev().collect();
        let mut pp = ps.clone();
        let np = ps.max_points;
        let mut buf = vec![0f32; ps.buffers.numel()];
        for (new, &old) in perm.iter().enumerate() {
            let w = np * POINT_DIM;
            buf[new * w..(new + 1) * w].copy_from_slice(&ps.buffers.data()[old * w..(old + 1) * w]);
            pp.point_mask[new * np..(new + 1) * np].copy_from_slice(&ps.point_mask[old * np..(old + 1) * np]);
        }
        pp.buffers = Tensor::new(ps.buffers.shape(), buf).unwrap();
        pp.coords = perm.iter().map(|&i| ps.coords[i]).collect();
        pp.counts = perm.iter().map(|&i| ps.counts[i]).collect();
        pp.centroids = perm.iter().map(|&i| ps.centroids[i]).collect();
        let enc = |set: &PillarSet| {
            let mut tape = Tape::<f64>::new();
            let p = s.bind(&mut tape);
            let g = graph_for(set, &cfg).unwrap();
            let c = encode_frame(&mut tape, &p, set, g.as_ref(), &cfg).unwrap();
            tape.value(c).clone()
        };
        let (a, b) = (enc(&ps), enc(&pp));
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn pfn_and_message_gradients() {
        let cfg = small_cfg(4, 3, 1, 2);
        let s = store(&cfg, 18);
        let ps = pillarize(&random_frame(40, 19), &pillar_cfg()).unwrap();
        let g = build_knn(&ps.centroids, 2).unwrap();
        let names = ["pmpnet.pfn.w", "pmpnet.pfn.b", "pmpnet.msg.w", "pmpnet.msg.b"];
        let ins: Vec<Tensor<f64>> = names.iter().map(|n| s.get(n).unwrap().cast()).collect();
        let e = max_relative_error(&ins, DEFAULT_EPS, |t, v| {
            let mut p = s.bind(t);
            for (n, &var) in names.iter().zip(v) {
                p.replace(n, var)?;
            }
            let h = pfn_init(t, &p, &ps)?;
            let m = message_pass_step(t, &p, &g, h)?;
            project(t, m, 3)
        })
        .unwrap();
        assert!(e <= 1e-6, "{e}");
    }
}
