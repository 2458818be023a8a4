//! `kvq check`: built-in verification suites with per-suite summaries.
//!
//! Exit 0 when every property holds, exit 1 listing the failures. The hidden
//! sign-error injection negates one op's analytic gradient before comparing,
//! proving the harness actually catches wrong gradients.

use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use kvq_core::backbone::BackboneConfig;
use kvq_core::data::lpvq;
use kvq_core::data::synth::{synth_clip, SynthConfig};
use kvq_core::fwa::top_k_rows;
use kvq_core::metrics;
use kvq_core::model::KvqModel;
use kvq_core::tensor::{read_tensor_from, write_tensor_to, Tape, Tensor, TensorId};
use kvq_core::Result as CoreResult;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

type Check = (&'static str, Box<dyn Fn() -> Result<(), String>>);

pub fn run(mutate: Option<&str>) -> ExitCode {
    let start = Instant::now();
    let mutate = mutate.map(str::to_string);
    let mut checks: Vec<Check> = Vec::new();

    for &op in GRAD_OPS {
        let flip = mutate.as_deref() == Some(op);
        checks.push((
            Box::leak(format!("gradient.{op}").into_boxed_str()),
            Box::new(move || gradient_check_op(op, flip)),
        ));
    }
    checks.push(("forward.matmul_oracle", Box::new(matmul_oracle)));
    checks.push(("forward.avg_pool_oracle", Box::new(avg_pool_oracle)));
    checks.push(("attention.dense_oracles", Box::new(attention_oracles)));
    checks.push(("attention.routing_exactness", Box::new(routing_exactness)));
    checks.push(("attention.conservation", Box::new(conservation)));
    checks.push(("metrics.units", Box::new(metric_units)));
    checks.push(("formats.kvqt_round_trip", Box::new(kvqt_round_trip)));
    checks.push(("formats.annotation_round_trip", Box::new(annotation_round_trip)));
    checks.push(("model.forward_invariants", Box::new(model_invariants)));

    let mut failures = Vec::new();
    for (name, check) in &checks {
        match check() {
            Ok(()) => println!("ok   {name}"),
            Err(msg) => {
                println!("FAIL {name}: {msg}");
                failures.push(*name);
            }
        }
    }
    let elapsed = start.elapsed();
    if failures.is_empty() {
        println!("all {} checks passed in {:.1}s", checks.len(), elapsed.as_secs_f64());
        ExitCode::SUCCESS
    } else {
        println!(
            "{}/{} checks FAILED in {:.1}s: {}",
            failures.len(),
            checks.len(),
            elapsed.as_secs_f64(),
            failures.join(", ")
        );
        ExitCode::from(1)
    }
}

const GRAD_OPS: &[&str] = &[
    "add", "mul", "div", "exp", "sqrt", "gelu", "matmul", "softmax", "avg_pool",
    "resample3d", "layer_norm", "linear", "index_select", "concat", "sum_axis",
];

fn build_op(op: &str, tape: &mut Tape, x: TensorId) -> CoreResult<TensorId> {
    let out = match op {
        "add" => {
            let c = tape.constant(Tensor::from_fn(&[3, 4], |i| i as f64 * 0.1));
            tape.add(x, c)?
        }
        "mul" => {
            let c = tape.constant(Tensor::from_fn(&[3, 4], |i| i as f64 * 0.1 - 0.5));
            tape.mul(x, c)?
        }
        "div" => {
            let c = tape.constant(Tensor::from_fn(&[3, 4], |i| 0.8 + i as f64 * 0.1));
            tape.div(x, c)?
        }
        "exp" => tape.exp(x),
        "sqrt" => {
            let shifted = tape.add_const(x, 3.0); // keep inputs positive
            tape.sqrt(shifted)
        }
        "gelu" => tape.gelu(x),
        "matmul" => {
            let w = tape.constant(Tensor::from_fn(&[4, 2], |i| (i as f64 * 0.7).sin()));
            tape.matmul(x, w)?
        }
        "softmax" => tape.softmax(x, 1)?,
        "avg_pool" => {
            let r = tape.reshape(x, vec![2, 6])?;
            tape.avg_pool(r, &[2, 3])?
        }
        "resample3d" => {
            let r = tape.reshape(x, vec![2, 2, 3])?;
            tape.resample3d(r, &[3, 3, 2])?
        }
        "layer_norm" => {
            let g = tape.constant(Tensor::ones(&[4]));
            let b = tape.constant(Tensor::zeros(&[4]));
            tape.layer_norm(x, g, b, 1e-5)?
        }
        "linear" => {
            let w = tape.constant(Tensor::from_fn(&[4, 3], |i| (i as f64 * 0.3).cos()));
            let b = tape.constant(Tensor::from_fn(&[3], |i| i as f64 * 0.05));
            tape.linear(x, w, Some(b))?
        }
        "index_select" => tape.index_select(x, 0, Arc::new(vec![2, 0, 2]))?,
        "concat" => tape.concat(&[x, x], 1)?,
        "sum_axis" => tape.sum_axis(x, 0)?,
        other => panic!("unknown op {other}"),
    };
    // project to scalar with fixed weights
    let n = tape.data(out).len();
    let w = tape.constant(Tensor::from_fn(&[n], |i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.4));
    let flat = tape.reshape(out, vec![n])?;
    let p = tape.mul(flat, w)?;
    Ok(tape.sum_all(p))
}

/// Analytic vs central-difference gradient for one op; optionally negates the
/// analytic side to prove mismatches are caught.
fn gradient_check_op(op: &str, flip_sign: bool) -> Result<(), String> {
    let seeds = 10;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 31 + 7);
        let x = Tensor::from_fn(&[3, 4], |_| rng.random_range(-1.0..1.0));

        let mut tape = Tape::new();
        let xid = tape.param(x.clone());
        let out = build_op(op, &mut tape, xid).map_err(|e| e.to_string())?;
        let grads = tape.backward(out).map_err(|e| e.to_string())?;
        let mut analytic = grads.wrt(xid).ok_or("no gradient")?.to_vec();
        if flip_sign {
            for g in &mut analytic {
                *g = -*g;
            }
        }

        let eval = |data: Vec<f64>| -> Result<f64, String> {
            let mut tape = Tape::new();
            let xid = tape.constant(Tensor::new(x.shape().to_vec(), data).unwrap());
            let out = build_op(op, &mut tape, xid).map_err(|e| e.to_string())?;
            tape.value(out).item().map_err(|e| e.to_string())
        };
        let h = 1e-5;
        for i in 0..x.numel() {
            let mut plus = x.data().to_vec();
            plus[i] += h;
            let mut minus = x.data().to_vec();
            minus[i] -= h;
            let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-2);
            let rel = (analytic[i] - numeric).abs() / denom;
            if rel > 1e-6 {
                return Err(format!(
                    "seed {seed} element {i}: analytic {} vs numeric {} (rel {rel:.2e})",
                    analytic[i], numeric
                ));
            }
        }
    }
    Ok(())
}

fn matmul_oracle() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..20 {
        let a = Tensor::from_fn(&[3, 4], |_| rng.random_range(-1.0..1.0));
        let b = Tensor::from_fn(&[4, 2], |_| rng.random_range(-1.0..1.0));
        let mut tape = Tape::new();
        let aid = tape.constant(a.clone());
        let bid = tape.constant(b.clone());
        let c = tape.matmul(aid, bid).map_err(|e| e.to_string())?;
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0;
                for p in 0..4 {
                    acc += a.data()[i * 4 + p] * b.data()[p * 2 + j];
                }
                if (tape.data(c)[i * 2 + j] - acc).abs() > 1e-12 {
                    return Err(format!("({i},{j}): {} vs {acc}", tape.data(c)[i * 2 + j]));
                }
            }
        }
    }
    Ok(())
}

fn avg_pool_oracle() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let x = Tensor::from_fn(&[4, 4], |_| rng.random_range(-1.0..1.0));
    let mut tape = Tape::new();
    let xid = tape.constant(x.clone());
    let p = tape.avg_pool(xid, &[2, 2]).map_err(|e| e.to_string())?;
    for oh in 0..2 {
        for ow in 0..2 {
            let mut acc = 0.0;
            for ih in 0..2 {
                for iw in 0..2 {
                    acc += x.data()[(oh * 2 + ih) * 4 + ow * 2 + iw];
                }
            }
            if (tape.data(p)[oh * 2 + ow] - acc / 4.0).abs() > 1e-12 {
                return Err(format!("cell ({oh},{ow})"));
            }
        }
    }
    Ok(())
}

fn attention_oracles() -> Result<(), String> {
    // single window: intra-window attention equals plain full attention
    use kvq_core::fwa::{iwa, partition_windows, AttnProjections, WindowLayout};
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let c = 4;
    let layout = Arc::new(WindowLayout::new([1, 2, 2], [1, 2, 2]).map_err(|e| e.to_string())?);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_fn(&[1, 2, 2, c], |_| rng.random_range(-1.0..1.0)));
    let mk_w = |tape: &mut Tape, rng: &mut ChaCha8Rng| {
        let t = Tensor::from_fn(&[c, c], |_| rng.random_range(-1.0..1.0));
        tape.constant(t)
    };
    let proj = AttnProjections {
        wq: mk_w(&mut tape, &mut rng),
        wk: mk_w(&mut tape, &mut rng),
        wv: mk_w(&mut tape, &mut rng),
        wo: mk_w(&mut tape, &mut rng),
    };
    let wp = partition_windows(&mut tape, x, layout).map_err(|e| e.to_string())?;
    let out = iwa(&mut tape, &wp, &proj, 1).map_err(|e| e.to_string())?;

    // dense reference over all 4 positions
    let xd = tape.data(x).to_vec();
    let get = |id: TensorId, tape: &Tape| tape.data(id).to_vec();
    let (wq, wk, wv, wo) = (
        get(proj.wq, &tape),
        get(proj.wk, &tape),
        get(proj.wv, &tape),
        get(proj.wo, &tape),
    );
    let mm = |a: &[f64], b: &[f64], m: usize, k: usize, n: usize| {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    };
    let q = mm(&xd, &wq, 4, c, c);
    let k = mm(&xd, &wk, 4, c, c);
    let v = mm(&xd, &wv, 4, c, c);
    let scale = 1.0 / (c as f64).sqrt();
    let mut ctx = vec![0.0; 4 * c];
    for i in 0..4 {
        let mut scores = [0.0; 4];
        for j in 0..4 {
            for p in 0..c {
                scores[j] += q[i * c + p] * k[j * c + p];
            }
            scores[j] *= scale;
        }
        let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
        let total: f64 = exps.iter().sum();
        for j in 0..4 {
            for p in 0..c {
                ctx[i * c + p] += exps[j] / total * v[j * c + p];
            }
        }
    }
    let expect = mm(&ctx, &wo, 4, c, c);
    let got = tape.data(out.features);
    for (a, b) in got.iter().zip(&expect) {
        if (a - b).abs() > 1e-10 {
            return Err(format!("dense mismatch: {a} vs {b}"));
        }
    }
    Ok(())
}

fn routing_exactness() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for instance in 0..200 {
        let n = rng.random_range(2..8);
        let k = rng.random_range(1..n);
        let scores: Vec<f64> = (0..n * n)
            .map(|_| {
                if instance % 10 == 0 {
                    0.5
                } else {
                    rng.random_range(0.0_f64..1.0)
                }
            })
            .collect();
        let got = top_k_rows(&scores, n, k);
        for r in 0..n {
            let mut cand: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != r)
                .map(|j| (scores[r * n + j], j))
                .collect();
            cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let expect: Vec<usize> = cand.into_iter().take(k).map(|(_, j)| j).collect();
            if got[r] != expect {
                return Err(format!("instance {instance} row {r}: {:?} vs {expect:?}", got[r]));
            }
        }
    }
    Ok(())
}

fn conservation() -> Result<(), String> {
    let cfg = BackboneConfig {
        patch: [2, 4, 4],
        channels: vec![8],
        blocks: vec![1],
        window: [1, 2, 2],
        top_k: 1,
        heads: 2,
        ffn_mult: 2,
    };
    let model = KvqModel::init(cfg, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let video = Tensor::from_fn(&[4, 8, 8, 3], |_| rng.random_range(0.0..1.0));
    let maps = model.evaluate_clip(&video).map_err(|e| e.to_string())?;
    let mean: f64 = maps.saliency.data().iter().sum::<f64>() / maps.saliency.numel() as f64;
    if (mean - 1.0).abs() > 1e-6 {
        return Err(format!("saliency mean {mean}"));
    }
    if maps.saliency.data().iter().any(|&v| v < 0.0) {
        return Err("negative saliency".into());
    }
    let direct: f64 = maps
        .saliency
        .data()
        .iter()
        .zip(maps.texture.data())
        .map(|(s, q)| s * q)
        .sum::<f64>()
        / maps.texture.numel() as f64;
    if (maps.quality - direct).abs() > 1e-9 {
        return Err(format!("quality {} vs direct {direct}", maps.quality));
    }
    Ok(())
}

fn metric_units() -> Result<(), String> {
    let fail = |m: &str| Err::<(), String>(m.to_string());
    if metrics::srcc(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).map_err(|e| e.to_string())?
        - 0.8
        > 1e-12
    {
        return fail("srcc rank-difference case");
    }
    if (metrics::srcc(&[1.0, 5.0, 9.0], &[2.0, 3.0, 4.0]).map_err(|e| e.to_string())? - 1.0).abs()
        > 1e-12
    {
        return fail("srcc monotone");
    }
    let p = Tensor::new(vec![2], vec![0.75, 0.25]).unwrap();
    if metrics::kl_div(&p, &p).map_err(|e| e.to_string())?.abs() > 1e-9 {
        return fail("kl identity");
    }
    let pred = Tensor::new(vec![4], vec![0.9, 0.8, 0.2, 0.1]).unwrap();
    if metrics::sauc(&pred, &[0, 1], &[2, 3]).map_err(|e| e.to_string())? != 1.0 {
        return fail("sauc separation");
    }
    // degenerate prediction is an error, not a number
    if metrics::nss(&Tensor::full(&[4], 1.0), &[0]).is_ok() {
        return fail("nss constant must be undefined");
    }
    Ok(())
}

fn kvqt_round_trip() -> Result<(), String> {
    let t = Tensor::from_fn(&[2, 3, 4], |i| (i as f64).exp() * 1e-3);
    let mut buf = Vec::new();
    write_tensor_to(&mut buf, &t).map_err(|e| e.to_string())?;
    let back = read_tensor_from(&mut buf.as_slice()).map_err(|e| e.to_string())?;
    if back.shape() != t.shape() {
        return Err("shape mismatch".into());
    }
    for (a, b) in back.data().iter().zip(t.data()) {
        if a.to_bits() != b.to_bits() {
            return Err("payload not bit-identical".into());
        }
    }
    Ok(())
}

fn annotation_round_trip() -> Result<(), String> {
    let dir = std::env::temp_dir().join(format!("kvq_check_{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let path = dir.join("ann.csv");
    let records = lpvq::synth_annotations(1, 3, 77);
    lpvq::write_lpvq_csv(&path, &records).map_err(|e| e.to_string())?;
    let back = lpvq::load_lpvq_csv(&path).map_err(|e| e.to_string())?;
    let _ = std::fs::remove_dir_all(&dir);
    if back != records {
        return Err("records differ after round trip".into());
    }
    Ok(())
}

fn model_invariants() -> Result<(), String> {
    let synth = SynthConfig { frames: 4, height: 16, width: 16, grid: [2, 2, 2] };
    let clip = synth_clip(3, &synth).map_err(|e| e.to_string())?;
    let recomputed = clip
        .saliency_proxy
        .data()
        .iter()
        .zip(clip.local_quality.data())
        .map(|(s, q)| s * q)
        .sum::<f64>()
        / clip.saliency_proxy.numel() as f64;
    if (clip.global_mos - recomputed).abs() > 1e-9 {
        return Err("opinion score does not match its maps".into());
    }
    Ok(())
}
