//! The finite-difference suite: every differentiable op and composite block,
//! checked in double precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::astgru::{self, AstGruConfig, Temporal};
use crate::backbone::{self, BackboneConfig};
use crate::error::Result;
use crate::gradcheck::{max_relative_error, project, random_tensor, CheckReport, DEFAULT_EPS};
use crate::params::{Bound, ParamStore};
use crate::pmpnet::{self, PmpConfig};
use crate::pointcloud::{pillarize, Frame, LidarPoint, PillarConfig, Pose};
use crate::tensor::{Tape, Tensor, Var};

/// Tolerance for single ops and blocks.
pub const OP_TOLERANCE: f64 = 1e-5;
/// Tolerance for the unrolled two-step recurrence.
pub const SEQUENCE_TOLERANCE: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rt(shape: &[usize], seed: u64) -> Tensor<f64> {
    random_tensor(shape, -1.0, 1.0, &mut rng(seed))
}

fn report(name: &str, tolerance: f64, err: Result<f64>) -> CheckReport {
    CheckReport {
        name: name.to_string(),
        max_rel_err: err.unwrap_or(f64::INFINITY),
        tolerance,
    }
}

/// Checks `f` with respect to `inputs` and the parameters `names` of `store`.
fn block<F>(name: &str, tol: f64, store: &ParamStore, names: &[&str], inputs: Vec<Tensor<f64>>, f: F) -> CheckReport
where
    F: Fn(&mut Tape<f64>, &Bound, &[Var]) -> Result<Var>,
{
    let n = inputs.len();
    let mut all = inputs;
    for p in names {
        match store.get(p) {
            Ok(t) => all.push(t.cast()),
            Err(e) => return report(name, tol, Err(e)),
        }
    }
    let err = max_relative_error(&all, DEFAULT_EPS, |t, v| {
        let mut p = store.bind(t);
        for (pn, &var) in names.iter().zip(&v[n..]) {
            p.replace(pn, var)?;
        }
        f(t, &p, &v[..n])
    });
    report(name, tol, err)
}

fn op<F>(name: &str, inputs: Vec<Tensor<f64>>, seed: u64, f: F) -> CheckReport
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let err = max_relative_error(&inputs, DEFAULT_EPS, |t, v| {
        let y = f(t, v)?;
        project(t, y, seed)
    });
    report(name, OP_TOLERANCE, err)
}

fn elementwise_ops() -> Vec<CheckReport> {
    let ab = || vec![rt(&[3, 4], 1), rt(&[3, 4], 2)];
    vec![
        op("add", ab(), 1, |t, v| t.add(v[0], v[1])),
        op("sub", ab(), 2, |t, v| t.sub(v[0], v[1])),
        op("mul", ab(), 3, |t, v| t.mul(v[0], v[1])),
        op("mul_scalar_broadcast", vec![rt(&[3, 4], 3), rt(&[1], 4)], 4, |t, v| t.mul(v[0], v[1])),
        op("affine", vec![rt(&[5], 5)], 5, |t, v| Ok(t.affine(v[0], 1.7, -0.3))),
        op("scale", vec![rt(&[5], 6)], 6, |t, v| Ok(t.scale(v[0], -2.5))),
        op("sigmoid", vec![random_tensor(&[6], -4.0, 4.0, &mut rng(7))], 7, |t, v| Ok(t.sigmoid(v[0]))),
        op("tanh", vec![random_tensor(&[6], -3.0, 3.0, &mut rng(8))], 8, |t, v| Ok(t.tanh(v[0]))),
        op("relu", vec![rt(&[8], 9)], 9, |t, v| Ok(t.relu(v[0]))),
        op("sum", vec![rt(&[2, 3], 10)], 10, |t, v| Ok(t.sum(v[0]))),
    ]
}

fn layout_ops() -> Vec<CheckReport> {
    vec![
        op("matmul", vec![rt(&[3, 4], 11), rt(&[4, 2], 12)], 11, |t, v| t.matmul(v[0], v[1])),
        op("transpose", vec![rt(&[3, 4], 13)], 13, |t, v| t.transpose(v[0])),
        op("reshape", vec![rt(&[3, 4], 14)], 14, |t, v| t.reshape(v[0], &[2, 6])),
        op("add_bias", vec![rt(&[3, 2, 2], 15), rt(&[3], 16)], 15, |t, v| t.add_bias(v[0], v[1], 0)),
        op("concat", vec![rt(&[2, 3], 17), rt(&[1, 3], 18)], 17, |t, v| t.concat(&[v[0], v[1]], 0)),
        op("narrow", vec![rt(&[4, 5], 19)], 19, |t, v| t.narrow(v[0], 1, 1, 3)),
        op("split", vec![rt(&[5, 2], 20)], 20, |t, v| {
            let parts = t.split(v[0], 0, &[2, 3])?;
            let a = t.sum(parts[0]);
            let b = t.scale(parts[1], 3.0);
            let b = t.sum(b);
            t.add(a, b)
        }),
        op("gather_rows", vec![rt(&[4, 3], 21)], 21, |t, v| t.gather_rows(v[0], &[3, 0, 3, 1])),
        op("scatter_rows", vec![rt(&[3, 2], 22)], 22, |t, v| t.scatter_rows(v[0], &[(0, 1), (2, 2), (1, 0)], 3, 3)),
    ]
}

fn spatial_ops() -> Vec<CheckReport> {
    vec![
        op("conv2d", vec![rt(&[2, 5, 5], 23), rt(&[3, 2, 3, 3], 24)], 23, |t, v| t.conv2d(v[0], v[1], 1, 1)),
        op("conv2d_stride2", vec![rt(&[2, 6, 6], 25), rt(&[2, 2, 3, 3], 26)], 25, |t, v| t.conv2d(v[0], v[1], 2, 1)),
        op("conv_transpose2d", vec![rt(&[2, 3, 3], 27), rt(&[2, 3, 3, 3], 28)], 27, |t, v| {
            t.conv_transpose2d(v[0], v[1], 2, 1, 1)
        }),
        op(
            "deform_conv",
            vec![rt(&[2, 4, 4], 29), random_tensor(&[18, 4, 4], -0.8, 0.8, &mut rng(30)), rt(&[2, 2, 3, 3], 31)],
            29,
            |t, v| t.deform_conv(v[0], v[1], v[2]),
        ),
        op(
            "bilinear_sample",
            vec![rt(&[2, 4, 5], 32), Tensor::from_f64(&[3, 2], &[0.3, 1.6, 2.2, 3.7, 1.5, 0.45]).expect("shape")],
            32,
            |t, v| t.bilinear_sample(v[0], v[1]),
        ),
        op("softmax", vec![random_tensor(&[3, 4], -2.0, 2.0, &mut rng(33))], 33, |t, v| t.softmax(v[0], 1)),
        op("max_axis", vec![rt(&[3, 4, 2], 34)], 34, |t, v| {
            let mask: Vec<bool> = (0..24).map(|i| i % 5 != 2).collect();
            t.max_axis(v[0], 1, Some(&mask))
        }),
    ]
}

fn loss_ops() -> Vec<CheckReport> {
    let mut r = rng(40);
    let labels: Vec<f64> = (0..8).map(|_| f64::from(r.gen_bool(0.3) as u8)).collect();
    let weights: Vec<f64> = (0..8).map(|_| r.gen_range(0.0..1.5)).collect();
    let target: Vec<f64> = (0..8).map(|_| r.gen_range(-2.0..2.0)).collect();
    let classes: Vec<usize> = (0..4).map(|_| r.gen_range(0..2)).collect();
    let w4 = weights[..4].to_vec();
    let logits = random_tensor(&[8], -3.0, 3.0, &mut rng(41));
    let scalar = |f: &dyn Fn(&mut Tape<f64>, Var) -> Result<Var>, name: &str, x: Tensor<f64>| {
        let e = max_relative_error(&[x], DEFAULT_EPS, |t, v| f(t, v[0]));
        report(name, OP_TOLERANCE, e)
    };
    vec![
        scalar(
            &|t, x| t.sigmoid_focal(x, &labels, &weights, 0.25, 2.0),
            "sigmoid_focal",
            logits.clone(),
        ),
        scalar(&|t, x| t.smooth_l1(x, &target, &weights, 1.0), "smooth_l1", random_tensor(&[8], -3.0, 3.0, &mut rng(42))),
        scalar(&|t, x| t.l1(x, &target, &weights), "l1", random_tensor(&[8], -3.0, 3.0, &mut rng(43))),
        scalar(&|t, x| t.softmax_ce(x, 0, &classes, &w4), "softmax_ce", rt(&[2, 4], 44)),
    ]
}

fn tiny_pillars() -> Result<crate::pointcloud::PillarSet> {
    let mut r = rng(50);
    let points = (0..60)
        .map(|_| LidarPoint::new(r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0), r.gen_range(-1.5..0.5), r.gen_range(0.0..1.0), 0.0))
        .collect();
    let cfg = PillarConfig {
        x_range: (-2.0, 2.0),
        y_range: (-2.0, 2.0),
        pillar_size: 1.0,
        max_points: 6,
        ..PillarConfig::desk()
    };
    pillarize(
        &Frame {
            points,
            pose: Pose::identity(),
            timestamp: 0.0,
        },
        &cfg,
    )
}

fn pmp_blocks() -> Vec<CheckReport> {
    let cfg = PmpConfig {
        state_dim: 3,
        message_dim: 2,
        steps: 1,
        k: 3,
    };
    let mut store = ParamStore::new();
    pmpnet::init_params(&mut store, &cfg, &mut rng(51));
    let pillars = match tiny_pillars() {
        Ok(p) => p,
        Err(e) => return vec![report("pfn", OP_TOLERANCE, Err(e))],
    };
    let mut r = rng(52);
    let centroids: Vec<[f64; 2]> = (0..7).map(|_| [r.gen_range(-3.0..3.0), r.gen_range(-3.0..3.0)]).collect();
    let graph = match pmpnet::build_knn(&centroids, cfg.k) {
        Ok(g) => g,
        Err(e) => return vec![report("message_step", OP_TOLERANCE, Err(e))],
    };
    let gru = ["pmpnet.gru.wz", "pmpnet.gru.uz", "pmpnet.gru.bz", "pmpnet.gru.wr", "pmpnet.gru.ur", "pmpnet.gru.br", "pmpnet.gru.wh", "pmpnet.gru.uh", "pmpnet.gru.bh"];
    vec![
        block("pfn", OP_TOLERANCE, &store, &["pmpnet.pfn.w", "pmpnet.pfn.b"], vec![], |t, p, _| {
            let y = pmpnet::pfn_init(t, p, &pillars)?;
            project(t, y, 53)
        }),
        block("message_step", OP_TOLERANCE, &store, &["pmpnet.msg.w", "pmpnet.msg.b"], vec![rt(&[7, 3], 54)], |t, p, v| {
            let y = pmpnet::message_pass_step(t, p, &graph, v[0])?;
            project(t, y, 55)
        }),
        block("node_gru", OP_TOLERANCE, &store, &gru, vec![rt(&[5, 3], 56), rt(&[5, 2], 57)], |t, p, v| {
            let y = pmpnet::node_update(t, p, v[0], v[1])?;
            project(t, y, 58)
        }),
    ]
}

fn backbone_blocks() -> Vec<CheckReport> {
    let cfg = BackboneConfig::with_widths(2, [2, 3, 2], 2);
    let mut store = ParamStore::new();
    backbone::init_params(&mut store, &cfg, &mut rng(60));
    // small nonzero biases keep ReLU inputs away from exact zeros
    for (name, t) in [("backbone.b0.l0.b", 61), ("backbone.b0.l1.b", 62), ("backbone.b0.l2.b", 63)] {
        if let Ok(b) = store.get_mut(name) {
            *b = random_tensor(b.shape(), -0.1, 0.1, &mut rng(t)).cast();
        }
    }
    vec![
        block(
            "backbone_block",
            OP_TOLERANCE,
            &store,
            &["backbone.b0.l0.w", "backbone.b0.l1.w", "backbone.b0.l2.w", "backbone.b0.l2.b"],
            vec![rt(&[2, 6, 6], 64)],
            |t, p, v| {
                let y = backbone::block_forward(t, p, &cfg, 0, v[0])?;
                project(t, y, 65)
            },
        ),
        block(
            "backbone_resample",
            OP_TOLERANCE,
            &store,
            &["backbone.up0.w", "backbone.up1.w", "backbone.up2.w", "backbone.up2.b"],
            vec![rt(&[2, 4, 4], 66), rt(&[3, 2, 2], 67), rt(&[2, 1, 1], 68)],
            |t, p, v| {
                let mut acc: Option<Var> = None;
                for i in 0..3 {
                    let y = backbone::resample(t, p, &cfg, i, v[i])?;
                    let s = project(t, y, 69 + i as u64)?;
                    acc = Some(match acc {
                        Some(a) => t.add(a, s)?,
                        None => s,
                    });
                }
                Ok(acc.expect("three branches"))
            },
        ),
    ]
}

fn temporal_blocks() -> Vec<CheckReport> {
    let cfg = AstGruConfig {
        embed: 2,
        ..AstGruConfig::new(3)
    };
    let mut store = ParamStore::new();
    astgru::init_params(&mut store, &cfg, &mut rng(70));
    // zero-initialized offset predictors would leave the deformable sampling on the grid
    for (name, s) in [
        ("tta.stage1.offset.w", 71),
        ("tta.stage1.offset.b", 72),
        ("tta.stage2.offset.w", 73),
        ("tta.stage2.offset.b", 74),
    ] {
        if let Ok(b) = store.get_mut(name) {
            *b = random_tensor(b.shape(), -0.1, 0.1, &mut rng(s)).cast();
        }
    }
    let gru = ["gru.wz", "gru.uz", "gru.bz", "gru.wr", "gru.ur", "gru.br", "gru.wh", "gru.uh", "gru.bh"];
    let map = |s| rt(&[3, 4, 4], s);
    let seq_params: Vec<&str> = vec!["sta.q.w", "sta.out.w", "tta.stage1.offset.w", "tta.stage2.w", "gru.wz", "gru.uh"];
    vec![
        block("sta", OP_TOLERANCE, &store, &["sta.q.w", "sta.k.w", "sta.v.w", "sta.out.w"], vec![map(75)], |t, p, v| {
            let y = astgru::sta(t, p, &cfg, v[0])?;
            project(t, y, 76)
        }),
        block(
            "tta_both_stages",
            OP_TOLERANCE,
            &store,
            &["tta.stage1.offset.w", "tta.stage1.offset.b", "tta.stage1.w", "tta.stage2.offset.w", "tta.stage2.offset.b", "tta.stage2.w"],
            vec![map(77), map(78)],
            |t, p, v| {
                let y = astgru::tta(t, p, v[0], v[1])?;
                project(t, y, 79)
            },
        ),
        block("convgru_cell", OP_TOLERANCE, &store, &gru, vec![map(80), map(81)], |t, p, v| {
            let y = astgru::conv_gru_cell(t, p, v[0], v[1])?;
            project(t, y, 82)
        }),
        block("astgru_sequence_t2", SEQUENCE_TOLERANCE, &store, &seq_params, vec![map(83), map(84)], |t, p, v| {
            let cfg = AstGruConfig {
                temporal: Temporal::AstGru,
                ..cfg
            };
            let hs = astgru::run_sequence(t, p, &cfg, v)?;
            let a = project(t, hs[0], 85)?;
            let b = project(t, hs[1], 86)?;
            t.add(a, b)
        }),
    ]
}

fn head_blocks() -> Vec<CheckReport> {
    use crate::head::{assign_targets, generate_anchors, head_forward, head_loss, AnchorConfig, Box3, GroundTruthBox, LossWeights};
    let mut store = ParamStore::new();
    crate::head::init_params(&mut store, 3, 2, &mut rng(90));
    let anchors = AnchorConfig::car();
    let grid = generate_anchors(&anchors, 3, 3, 4, 0.25, [-1.5, -1.5]);
    let gts = [GroundTruthBox {
        bbox: Box3 {
            center: [0.2, -0.1, -0.9],
            size: [1.8, 4.4, 1.5],
            yaw: 2.0,
        },
        velocity: [1.0, -0.5],
        class: 0,
    }];
    let targets = match assign_targets(&grid, &gts, &anchors) {
        Ok(t) => t,
        Err(e) => return vec![report("head_loss", OP_TOLERANCE, Err(e))],
    };
    let names = ["head.cls.w", "head.cls.b", "head.box.w", "head.vel.w", "head.dir.w", "head.dir.b"];
    vec![block("head_loss", OP_TOLERANCE, &store, &names, vec![rt(&[3, 3, 3], 91)], |t, p, v| {
        let out = head_forward(t, p, v[0])?;
        Ok(head_loss(t, &out, &targets, &LossWeights::default())?.total)
    })]
}

/// Every check, in a fixed order.
pub fn run_suite() -> Vec<CheckReport> {
    let mut all = elementwise_ops();
    all.extend(layout_ops());
    all.extend(spatial_ops());
    all.extend(loss_ops());
    all.extend(pmp_blocks());
    all.extend(backbone_blocks());
    all.extend(temporal_blocks());
    all.extend(head_blocks());
    all
}

pub fn format_reports(reports: &[CheckReport]) -> String {
    let mut s = String::from("check\tmax_rel_err\ttolerance\tstatus\n");
    for r in reports {
        s.push_str(&format!(
            "{}\t{:.3e}\t{:.0e}\t{}\n",
            r.name,
            r.max_rel_err,
            r.tolerance,
            if r.passed() { "ok" } else { "FAIL" }
        ));
    }
    s
}
