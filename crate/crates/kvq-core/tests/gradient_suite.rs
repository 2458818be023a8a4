//! Finite-difference oracles for every differentiable operation and for each
//! subsystem's composite forward pass. Central differences (h = 1e-5, 64-bit)
//! must agree with the tape's analytic gradients to a relative error below
//! 1e-6 on every seed.

use std::sync::Arc;

use kvq_core::backbone::{BackboneConfig, ForwardPlan, WindowMode};
use kvq_core::losses::{plcc_loss, rank_loss, total_loss, LossWeights};
use kvq_core::lpc::{lpc_loss, patchwise_texture, slice_patches};
use kvq_core::model::KvqModel;
use kvq_core::params::BoundParams;
use kvq_core::tensor::{grad_check, grad_check_sampled, Tape, Tensor, TensorId};
use kvq_core::Result;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-6;
const SEEDS: u64 = 100;

fn rng_for(op: &str, seed: u64) -> ChaCha8Rng {
    let tag: u64 = op.bytes().map(|b| b as u64).sum();
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9) ^ tag)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Fixed random projection making any output a scalar without symmetry.
fn project(tape: &mut Tape, out: TensorId, rng: &mut ChaCha8Rng) -> Result<TensorId> {
    let n = tape.data(out).len();
    let flat = tape.reshape(out, vec![n])?;
    let w = tape.constant(Tensor::from_fn(&[n], |_| rng.random_range(-1.0..1.0)));
    let prod = tape.mul(flat, w)?;
    Ok(tape.sum_all(prod))
}

/// Runs a per-seed gradient check and asserts every seed passes.
fn check_op<F>(op: &str, build: F)
where
    F: Fn(&mut ChaCha8Rng) -> (Tensor, Box<dyn Fn(&mut Tape, TensorId) -> Result<TensorId>>),
{
    for seed in 0..SEEDS {
        let mut rng = rng_for(op, seed);
        let (x, f) = build(&mut rng);
        let report = grad_check(|t, id| f(t, id), &x, H, TOL)
            .unwrap_or_else(|e| panic!("{op} seed {seed}: {e}"));
        assert!(
            report.passed,
            "{op} seed {seed}: max rel err {} at element {}",
            report.max_rel_err, report.worst_index
        );
    }
}

#[test]
fn elementwise_binary_ops() {
    check_op("add", |rng| {
        let x = rand_tensor(rng, &[3, 4], -2.0, 2.0);
        let other = rand_tensor(rng, &[3, 4], -2.0, 2.0);
        let proj = rng.clone();
        (
            x,
            Box::new(move |t, id| {
                let o = t.constant(other.clone());
                let s = t.add(id, o)?;
                project(t, s, &mut proj.clone())
            }),
        )
    });
    check_op("sub_mul", |rng| {
        let x = rand_tensor(rng, &[2, 5], -2.0, 2.0);
        let other = rand_tensor(rng, &[2, 5], -2.0, 2.0);
        let proj = rng.clone();
        (
            x,
            Box::new(move |t, id| {
                let o = t.constant(other.clone());
                let d = t.sub(id, o)?;
                let m = t.mul(d, id)?;
                project(t, m, &mut proj.clone())
            }),
        )
    });
    check_op("div_both_sides", |rng| {
        // x holds both numerator and denominator halves; denominator bounded
        // away from zero
        let num = rand_tensor(rng, &[6], -2.0, 2.0);
        let den = rand_tensor(rng, &[6], 0.5, 2.5);
        let x = Tensor::new(vec![12], [num.data(), den.data()].concat()).unwrap();
        let proj = rng.clone();
        (
            x,
            Box::new(move |t, id| {
                let n = t.index_select(id, 0, Arc::new((0..6).collect()))?;
                let d = t.index_select(id, 0, Arc::new((6..12).collect()))?;
                let q = t.div(n, d)?;
                project(t, q, &mut proj.clone())
            }),
        )
    });
    check_op("scalar_broadcast", |rng| {
        let x = rand_tensor(rng, &[7], -1.0, 1.0);
        let proj = rng.clone();
        (
            x,
            Box::new(move |t, id| {
                let c = t.constant(Tensor::scalar(1.7));
                let scaled = t.mul(id, c)?;
                let shifted = t.add(scaled, c)?;
                project(t, shifted, &mut proj.clone())
            }),
        )
    });
}

#[test]
fn elementwise_unary_ops() {
    check_op("exp", |rng| {
        let x = rand_tensor(rng, &[3, 3], -1.5, 1.5);
        let proj = rng.clone();
        (x, Box::new(move |t, id| { let e = t.exp(id); project(t, e, &mut proj.clone()) }))
    });
    check_op("sqrt", |rng| {
        let x = rand_tensor(rng, &[8], 0.5, 3.0);
        let proj = rng.clone();
        (x, Box::new(move |t, id| { let s = t.sqrt(id); project(t, s, &mut proj.clone()) }))
    });
    check_op("gelu", |rng| {
        let x = rand_tensor(rng, &[2, 6], -2.0, 2.0);
        let proj = rng.clone();
        (x, Box::new(move |t, id| { let g = t.gelu(id); project(t, g, &mut proj.clone()) }))
    });
    check_op("clamp_min_off_kink", |rng| {
        // values at least 0.1 from the hinge at 0.3
        let x = Tensor::from_fn(&[9], |_| {
            let v: f64 = rng.random_range(-2.0..2.0);
            if (v - 0.3).abs() < 0.1 { v + 0.25 } else { v }
        });
        let proj = rng.clone();
        (x, Box::new(move |t, id| { let c = t.clamp_min(id, 0.3); project(t, c, &mut proj.clone()) }))
    });
    check_op("scale_add_const", |rng| {
        let x = rand_tensor(rng, &[5], -1.0, 1.0);
        let proj = rng.clone();
        (
            x,
            Box::new(move |t, id| {
                let s = t.scale(id, -2.5);
                let a = t.add_const(s, 0.7);
                project(t, a, &mut proj.clone())
            }),
        )
    });
}

#[test]
fn linear_algebra_ops() {
    check_op("matmul_wrt_lhs", |rng| {
        let x = rand_tensor(rng, &[3, 4], -1.0, 1.0);
        let b = rand_tensor(rng, &[4, 2], -1.0, 1.0);
        let proj = rng.clone();
        (
            x,
            Box::new(move |t, id| {
                let bid = t.constant(b.clone());
                let c = t.matmul(id, bid)?;
                project(t, c, &mut proj.clone())
            }),
        )
    });
    check_op("matmul_wrt_rhs", |rng| {
        let a = rand_tensor(rng, &[3, 4], -1.0, 1.0);
        let x = rand_tensor(rng, &[4, 2], -1.0, 1.0);
        let proj = rng.clone();
        (
            x,
            Box::new(move |t, id| {
                let aid = t.constant(a.clone());
                let c = t.matmul(aid, id)?;
                project(t, c, &mut proj.clone())
            }),
        )
    });
    check_op("bmm_plain_and_transposed", |rng| {
        let x = rand_tensor(rng, &[2, 3, 4], -1.0, 1.0);
        let b = rand_tensor(rng, &[2, 4, 3], -1.0, 1.0);
        let proj = rng.clone();
        (
            x,
            Box::new(move |t, id| {
                let bid = t.constant(b.clone());
                let c1 = t.bmm(id, bid, false)?; // [2,3,3]
                // transposed product against itself exercises both operand
                // gradients of the transpose_b path
                let c2 = t.bmm(c1, c1, true)?;
                project(t, c2, &mut proj.clone())
            }),
        )
    });
    check_op("transpose_reshape", |rng| {
        let x = rand_tensor(rng, &[3, 5], -1.0, 1.0);
        let proj = rng.clone();
        (
            x,
            Box::new(move |t, id| {
                let tr = t.transpose2d(id)?;
                let rs = t.reshape(tr, vec![15])?;
                project(t, rs, &mut proj.clone())
            }),
        )
    });
    check_op("linear_wrt_input", |rng| {
        let x = rand_tensor(rng, &[2, 3, 4], -1.0, 1.0);
        let w = rand_tensor(rng, &[4, 5], -1.0, 1.0);
        let b = rand_tensor(rng, &[5], -0.5, 0.5);
        let proj = rng.clone();
        (
            x,
            Box::new(move |t, id| {
                let wid = t.constant(w.clone());
                let bid = t.constant(b.clone());
                let y = t.linear(id, wid, Some(bid))?;
                project(t, y, &mut proj.clone())
            }),
        )
    });
    check_op("linear_wrt_weight_and_bias", |rng| {
        // weight and bias packed into one checked tensor
        let xin = rand_tensor(rng, &[3, 4], -1.0, 1.0);
        let packed = rand_tensor(rng, &[4 * 5 + 5], -1.0, 1.0);
        let proj = rng.clone();
        (
            packed,
            Box::new(move |t, id| {
                let w_flat = t.index_select(id, 0, Arc::new((0..20).collect()))?;
                let w = t.reshape(w_flat, vec![4, 5])?;
                let b = t.index_select(id, 0, Arc::new((20..25).collect()))?;
                let xid = t.constant(xin.clone());
                let y = t.linear(xid, w, Some(b))?;
                project(t, y, &mut proj.clone())
            }),
        )
    });
}

#[test]
fn reduction_and_structure_ops() {
    check_op("sum_mean_all", |rng| {
        let x = rand_tensor(rng, &[4, 3], -1.0, 1.0);
        (
            x,
            Box::new(move |t, id| {
                let s = t.sum_all(id);
                let m = t.mean_all(id);
                t.add(s, m)
            }),
        )
    });
    check_op("sum_axis", |rng| {
        let x = rand_tensor(rng, &[3, 4, 2], -1.0, 1.0);
        let proj = rng.clone();
        (
            x,
            Box::new(move |t, id| {
                let s0 = t.sum_axis(id, 1)?;
                project(t, s0, &mut proj.clone())
            }),
        )
    });
    check_op("softmax_axes", |rng| {
        let x = rand_tensor(rng, &[3, 4], -2.0, 2.0);
        let proj = rng.clone();
        (
            x,
            Box::new(move |t, id| {
                let s1 = t.softmax(id, 1)?;
                let s0 = t.softmax(s1, 0)?;
                project(t, s0, &mut proj.clone())
            }),
        )
    });
    check_op("avg_pool", |rng| {
        let x = rand_tensor(rng, &[4, 6], -1.0, 1.0);
        let proj = rng.clone();
        (
            x,
            Box::new(move |t, id| {
                let p = t.avg_pool(id, &[2, 3])?;
                project(t, p, &mut proj.clone())
            }),
        )
    });
    check_op("resample3d_up_down", |rng| {
        let x = rand_tensor(rng, &[2, 3, 4], -1.0, 1.0);
        let proj = rng.clone();
        (
            x,
            Box::new(move |t, id| {
                let up = t.resample3d(id, &[3, 5, 7])?;
                let down = t.resample3d(up, &[2, 2, 3])?;
                project(t, down, &mut proj.clone())
            }),
        )
    });
    check_op("layer_norm_wrt_input", |rng| {
        let x = rand_tensor(rng, &[3, 6], -2.0, 2.0);
        let g = rand_tensor(rng, &[6], 0.5, 1.5);
        let b = rand_tensor(rng, &[6], -0.5, 0.5);
        let proj = rng.clone();
        (
            x,
            Box::new(move |t, id| {
                let gid = t.constant(g.clone());
                let bid = t.constant(b.clone());
                let y = t.layer_norm(id, gid, bid, 1e-5)?;
                project(t, y, &mut proj.clone())
            }),
        )
    });
    check_op("layer_norm_wrt_affine", |rng| {
        let xin = rand_tensor(rng, &[4, 3], -2.0, 2.0);
        let packed = rand_tensor(rng, &[6], -1.0, 1.0);
        let proj = rng.clone();
        (
            packed,
            Box::new(move |t, id| {
                let g = t.index_select(id, 0, Arc::new(vec![0, 1, 2]))?;
                let b = t.index_select(id, 0, Arc::new(vec![3, 4, 5]))?;
                let xid = t.constant(xin.clone());
                let y = t.layer_norm(xid, g, b, 1e-5)?;
                project(t, y, &mut proj.clone())
            }),
        )
    });
    check_op("gather_and_select_with_repeats", |rng| {
        let x = rand_tensor(rng, &[4, 3], -1.0, 1.0);
        let proj = rng.clone();
        (
            x,
            Box::new(move |t, id| {
                let rows = t.index_select(id, 0, Arc::new(vec![1, 1, 3, 0]))?;
                let flat = t.gather_flat(rows, Arc::new(vec![0, 5, 5, 2, 11, 7]), vec![6])?;
                project(t, flat, &mut proj.clone())
            }),
        )
    });
    check_op("concat", |rng| {
        let x = rand_tensor(rng, &[2, 3], -1.0, 1.0);
        let other = rand_tensor(rng, &[2, 2], -1.0, 1.0);
        let proj = rng.clone();
        (
            x,
            Box::new(move |t, id| {
                let o = t.constant(other.clone());
                let c = t.concat(&[id, o, id], 1)?;
                project(t, c, &mut proj.clone())
            }),
        )
    });
}

#[test]
fn composite_matmul_softmax_pool_chain() {
    check_op("matmul_softmax_pool", |rng| {
        let x = rand_tensor(rng, &[4, 4], -1.0, 1.0);
        let w = rand_tensor(rng, &[4, 4], -1.0, 1.0);
        let proj = rng.clone();
        (
            x,
            Box::new(move |t, id| {
                let wid = t.constant(w.clone());
                let scores = t.matmul(id, wid)?;
                let probs = t.softmax(scores, 1)?;
                let pooled = t.avg_pool(probs, &[2, 2])?;
                project(t, pooled, &mut proj.clone())
            }),
        )
    });
}

#[test]
fn loss_gradients_match_finite_differences() {
    check_op("plcc_loss", |rng| {
        let x = rand_tensor(rng, &[6], -1.0, 1.0);
        let gt: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..5.0)).collect();
        (
            x,
            Box::new(move |t, id| Ok(plcc_loss(t, id, &gt)?.value)),
        )
    });
    check_op("rank_loss_off_kink", |rng| {
        // keep prediction differences away from the hinge kink
        let mut vals: Vec<f64> = (0..5).map(|i| i as f64 * 0.5).collect();
        vals.shuffle(rng);
        for v in &mut vals {
            *v += rng.random_range(-0.1..0.1);
        }
        let x = Tensor::new(vec![5], vals).unwrap();
        let gt: Vec<f64> = (0..5).map(|i| (i * i) as f64).collect();
        (x, Box::new(move |t, id| rank_loss(t, id, &gt)))
    });
    check_op("lpc_loss_both_maps", |rng| {
        let packed = rand_tensor(rng, &[16], 0.2, 1.0);
        (
            packed,
            Box::new(move |t, id| {
                let q = t.index_select(id, 0, Arc::new((0..8).collect()))?;
                let qh = t.index_select(id, 0, Arc::new((8..16).collect()))?;
                Ok(lpc_loss(t, q, qh)?.value)
            }),
        )
    });
    check_op("total_loss", |rng| {
        let x = rand_tensor(rng, &[6], -1.0, 1.0);
        let gt: Vec<f64> = (0..6).map(|i| i as f64 + 0.1).collect();
        let w = LossWeights { lambda_r: 0.7, lambda_p: 1.3 };
        (
            x,
            Box::new(move |t, id| {
                let p = plcc_loss(t, id, &gt)?;
                let r = rank_loss(t, id, &gt)?;
                // stand-in constraint: mean of squared predictions
                let sq = t.mul(id, id)?;
                let l = t.mean_all(sq);
                total_loss(t, p.value, r, l, &w)
            }),
        )
    });
}

fn small_model() -> (KvqModel, [usize; 3]) {
    let cfg = BackboneConfig {
        patch: [2, 4, 4],
        channels: vec![8, 8],
        blocks: vec![1, 1],
        window: [1, 2, 2],
        top_k: 1,
        heads: 2,
        ffn_mult: 2,
    };
    (KvqModel::init(cfg, 77), [4, 16, 16])
}

/// Model forward to scalar quality with one named parameter swapped for the
/// checked tensor.
fn model_quality_wrt_param<'a>(
    model: &'a KvqModel,
    dims: [usize; 3],
    video: &Tensor,
    param: &str,
) -> impl Fn(&mut Tape, TensorId) -> Result<TensorId> + 'a {
    let video = video.clone();
    let param = param.to_string();
    move |tape, xid| {
        let plan = ForwardPlan::new(&model.cfg, dims, WindowMode::Strict)?;
        let mut bound = BoundParams::bind(tape, &model.params, false);
        bound.set(&param, xid);
        let vid = tape.constant(video.clone());
        let maps = model.forward(tape, vid, &plan, &bound)?;
        Ok(maps.quality)
    }
}

#[test]
fn full_model_quality_gradients_wrt_parameters() {
    let (model, dims) = small_model();
    let param_names = [
        "embed.w",
        "s0.b0.corr.wq",
        "s0.b0.intra.wv",
        "s0.b0.ffn.w1",
        "s0.b0.ln1.g",
        "merge0.w",
        "s1.b0.corr.wk",
        "texture.w",
        "saliency.w",
        "ensemble.w",
    ];
    // 100 seeds spread across the parameter list, a few sampled elements each
    for seed in 0..SEEDS {
        let name = param_names[(seed as usize) % param_names.len()];
        let mut rng = rng_for("model_quality", seed);
        let video = rand_tensor(&mut rng, &[dims[0], dims[1], dims[2], 3], 0.0, 1.0);
        let x = model.params.get(name).unwrap().clone();
        let elements: Vec<usize> =
            (0..4).map(|_| rng.random_range(0..x.numel())).collect();
        let f = model_quality_wrt_param(&model, dims, &video, name);
        let report = grad_check_sampled(f, &x, H, TOL, &elements)
            .unwrap_or_else(|e| panic!("model wrt {name} seed {seed}: {e}"));
        assert!(
            report.passed,
            "model wrt {name} seed {seed}: rel err {}",
            report.max_rel_err
        );
    }
}

#[test]
fn full_model_quality_gradient_wrt_video_input() {
    let (model, dims) = small_model();
    for seed in 0..10 {
        let mut rng = rng_for("model_video", seed);
        let video = rand_tensor(&mut rng, &[dims[0], dims[1], dims[2], 3], 0.0, 1.0);
        let elements: Vec<usize> =
            (0..6).map(|_| rng.random_range(0..video.numel())).collect();
        let report = grad_check_sampled(
            |tape, xid| {
                let plan = ForwardPlan::new(&model.cfg, dims, WindowMode::Strict)?;
                let bound = BoundParams::bind(tape, &model.params, false);
                let maps = model.forward(tape, xid, &plan, &bound)?;
                Ok(maps.quality)
            },
            &video,
            H,
            TOL,
            &elements,
        )
        .unwrap();
        assert!(report.passed, "video seed {seed}: rel err {}", report.max_rel_err);
    }
}

#[test]
fn patch_constraint_path_gradients_wrt_parameters() {
    // combined objective of the two texture views, differentiated through
    // both the full forward and every per-patch forward
    let cfg = BackboneConfig {
        patch: [2, 4, 4],
        channels: vec![8],
        blocks: vec![1],
        window: [1, 2, 2],
        top_k: 1,
        heads: 2,
        ffn_mult: 2,
    };
    let model = KvqModel::init(cfg.clone(), 99);
    let dims = [2, 8, 8];
    let stride = cfg.total_stride();
    let param_names = ["embed.w", "s0.b0.intra.wq", "s0.b0.ffn.w2", "texture.w"];
    for seed in 0..20 {
        let name = param_names[(seed as usize) % param_names.len()];
        let mut rng = rng_for("lpc_path", seed);
        let video = rand_tensor(&mut rng, &[dims[0], dims[1], dims[2], 3], 0.0, 1.0);
        let x = model.params.get(name).unwrap().clone();
        let elements: Vec<usize> =
            (0..4).map(|_| rng.random_range(0..x.numel())).collect();
        let video_c = video.clone();
        let report = grad_check_sampled(
            |tape, xid| {
                let plan = ForwardPlan::new(&model.cfg, dims, WindowMode::Strict)?;
                let mut bound = BoundParams::bind(tape, &model.params, false);
                bound.set(name, xid);
                let vid = tape.constant(video_c.clone());
                let maps = model.forward(tape, vid, &plan, &bound)?;
                let grid = slice_patches(&video_c, stride)?;
                let qhat = patchwise_texture(&model, tape, &grid, &bound)?;
                Ok(lpc_loss(tape, maps.texture, qhat)?.value)
            },
            &x,
            H,
            TOL,
            &elements,
        )
        .unwrap_or_else(|e| panic!("lpc path wrt {name} seed {seed}: {e}"));
        assert!(
            report.passed,
            "lpc path wrt {name} seed {seed}: rel err {}",
            report.max_rel_err
        );
    }
}
