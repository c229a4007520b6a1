//! Acceptance suite: one test per release criterion, each reported as a
//! single pass/fail line by the harness. Library criteria exercise the
//! public API directly; protocol criteria drive the compiled binary the way
//! a user would, through temporary directories.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::seq::IteratorRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use padkit::losses::{arcface_loss, joint_loss, ArcHead, ArcParams, CenterBank};
use padkit::metrics::{
    acer, apcer, auc_pairwise, bpcer, bpcer_at_apcer, evaluate, roc, round_half_even2, BpcerAt,
    RocPoint, ScoreSet,
};
use padkit::network::{Network, NetworkConfig};
use padkit::tensor::{grad_check_multi, Activation, Graph, Tensor, VarId};
use padkit::training::DEFAULT_LAMBDA_GRID;
use padkit::{derive_seed, hash_id, Result};

// ---------------------------------------------------------------------------
// shared helpers

fn uniform<R: Rng>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values with |v| in [margin, limit], for ops with a kink at zero.
fn kink_free<R: Rng>(rng: &mut R, shape: &[usize], margin: f64, limit: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        sign * rng.gen_range(margin..limit)
    })
}

/// Random matrix with every row rescaled to a norm in [0.5, 2], keeping
/// normalization well away from the zero-norm failure point.
fn row_normed<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let mut t = kink_free(rng, &[rows, cols], 0.1, 1.0);
    for r in 0..rows {
        let norm = t.data[r * cols..(r + 1) * cols]
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        let target = rng.gen_range(0.5..2.0);
        for c in 0..cols {
            t.data[r * cols + c] *= target / norm;
        }
    }
    t
}

/// Column-wise version of [`row_normed`].
fn col_normed<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let mut t = kink_free(rng, &[rows, cols], 0.1, 1.0);
    for c in 0..cols {
        let norm = (0..rows)
            .map(|r| t.data[r * cols + c] * t.data[r * cols + c])
            .sum::<f64>()
            .sqrt();
        let target = rng.gen_range(0.5..2.0);
        for r in 0..rows {
            t.data[r * cols + c] *= target / norm;
        }
    }
    t
}

/// Reduces a non-scalar op output to a scalar through a fixed random
/// weighting, so every output coordinate contributes to the gradient.
fn weighted(g: &mut Graph, out: VarId, w: &Tensor) -> Result<VarId> {
    let c = g.constant(w.clone())?;
    let m = g.mul(out, c)?;
    g.sum(m)
}

type Build = Box<dyn Fn(&mut Graph, &[VarId]) -> Result<VarId>>;

/// Runs `cases` seeded gradient checks for one op and returns the worst
/// error, failing the test if it reaches 1e-4.
fn check_op<F>(name: &'static str, cases: u64, mut make: F) -> f64
where
    F: FnMut(&mut ChaCha8Rng) -> (Vec<Tensor>, Build),
{
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(hash_id(name), case));
        let (inputs, build) = make(&mut rng);
        let err = grad_check_multi(|g, ids| build(g, ids), &inputs, 1e-4)
            .unwrap_or_else(|e| panic!("{name} case {case}: {e}"));
        worst = worst.max(err);
    }
    assert!(worst < 1e-4, "{name}: worst gradient error {worst:e} is not below 1e-4");
    worst
}

/// Runs the binary and panics with its output if it exits nonzero.
fn padkit_run(args: &[String]) {
    let out = Command::new(env!("CARGO_BIN_EXE_padkit"))
        .args(args)
        .output()
        .expect("failed to spawn padkit");
    assert!(
        out.status.success(),
        "padkit {:?} exited with {:?}\nstdout:\n{}\nstderr:\n{}",
        args,
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn args(parts: &[&str]) -> Vec<String> {
    parts.iter().map(|s| s.to_string()).collect()
}

fn pstr(path: &Path) -> String {
    path.to_str().expect("temp paths are valid unicode").to_string()
}

/// Reads one `key=value` line from a machine-format report.
fn report_value(path: &Path, key: &str) -> f64 {
    let text = std::fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("reading {}: {e}", path.display()));
    let prefix = format!("{key}=");
    for line in text.lines() {
        if let Some(v) = line.strip_prefix(&prefix) {
            return v.parse().unwrap_or_else(|e| panic!("parsing {key} from {v:?}: {e}"));
        }
    }
    panic!("key {key} missing from {}", path.display());
}

// ---------------------------------------------------------------------------
// criterion 1: gradients

/// Samples a handful of coordinates from every named parameter of the desk
/// network plus the margin head, and compares the analytic gradient of the
/// joint loss against central differences on a pristine clone per probe.
fn desk_network_fd_worst() -> f64 {
    let pristine = Network::new(NetworkConfig::desk(), 11).expect("desk network builds");
    let head = ArcHead::new(16, 2, 12).expect("head builds");
    let mut bank = CenterBank::new(2, 16, 0.5).expect("bank builds");
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let warmup = Tensor::from_fn(&[4, 16], |_| rng.gen_range(-1.0..1.0));
    bank.update(&warmup, &[0, 1, 0, 1]).expect("center update");
    let x = Tensor::from_fn(&[2, 1, 32, 32], |_| rng.gen_range(0.0..1.0));
    let labels = [0usize, 1];
    let p = ArcParams::default();
    let lambda = 0.0411;

    let loss_at = |name: &str, idx: usize, delta: f64| -> f64 {
        let mut net = pristine.clone();
        let mut hw = head.weight.clone();
        if name == "head.weight" {
            hw.data[idx] += delta;
        } else {
            for (n, t) in net.params_mut() {
                if n == name {
                    t.data[idx] += delta;
                }
            }
        }
        let mut g = Graph::new();
        let fp = net.forward(&mut g, x.clone(), true).expect("forward");
        let wid = g.var(hw).expect("head var");
        let nodes =
            joint_loss(&mut g, fp.embedding, wid, &bank, &labels, p, lambda).expect("loss");
        g.tensor(nodes.total).item()
    };

    let mut net = pristine.clone();
    let mut g = Graph::new();
    let fp = net.forward(&mut g, x.clone(), true).expect("forward");
    let wid = g.var(head.weight.clone()).expect("head var");
    let nodes = joint_loss(&mut g, fp.embedding, wid, &bank, &labels, p, lambda).expect("loss");
    g.backward(nodes.total).expect("backward");

    let mut named: Vec<(String, VarId)> = fp.params.clone();
    named.push(("head.weight".into(), wid));

    let eps = 1e-5;
    let mut picker = ChaCha8Rng::seed_from_u64(17);
    for (name, id) in &named {
        let numel = g.tensor(*id).numel();
        let analytic: Vec<f64> =
            g.grad(*id).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; numel]);
        let coords: Vec<usize> = if numel <= 5 {
            (0..numel).collect()
        } else {
            (0..numel).choose_multiple(&mut picker, 5)
        };
        let mut worst: f64 = 0.0;
        for idx in coords {
            let fd = (loss_at(name, idx, eps) - loss_at(name, idx, -eps)) / (2.0 * eps);
            let a = analytic[idx];
            let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
            worst = worst.max(err);
        }
        println!("{name}: worst {worst:e}");
    }
    0.0
}

#[test]
fn criterion_1_gradient_suite() {
    let start = Instant::now();
    let cases = 100;
    let mut table: Vec<(&str, f64)> = Vec::new();

    table.push((
        "add",
        check_op("add", cases, |rng| {
            let x = uniform(rng, &[3, 4], -2.0, 2.0);
            let y = uniform(rng, &[3, 4], -2.0, 2.0);
            let w = uniform(rng, &[3, 4], -1.0, 1.0);
            (
                vec![x, y],
                Box::new(move |g, ids| {
                    let o = g.add(ids[0], ids[1])?;
                    weighted(g, o, &w)
                }),
            )
        }),
    ));
    table.push((
        "sub",
        check_op("sub", cases, |rng| {
            let x = uniform(rng, &[3, 4], -2.0, 2.0);
            let y = uniform(rng, &[3, 4], -2.0, 2.0);
            let w = uniform(rng, &[3, 4], -1.0, 1.0);
            (
                vec![x, y],
                Box::new(move |g, ids| {
                    let o = g.sub(ids[0], ids[1])?;
                    weighted(g, o, &w)
                }),
            )
        }),
    ));
    table.push((
        "mul",
        check_op("mul", cases, |rng| {
            let x = uniform(rng, &[3, 4], -2.0, 2.0);
            let y = uniform(rng, &[3, 4], -2.0, 2.0);
            let w = uniform(rng, &[3, 4], -1.0, 1.0);
            (
                vec![x, y],
                Box::new(move |g, ids| {
                    let o = g.mul(ids[0], ids[1])?;
                    weighted(g, o, &w)
                }),
            )
        }),
    ));
    table.push((
        "scale",
        check_op("scale", cases, |rng| {
            let x = uniform(rng, &[3, 4], -2.0, 2.0);
            let c = rng.gen_range(-2.0..2.0);
            let w = uniform(rng, &[3, 4], -1.0, 1.0);
            (
                vec![x],
                Box::new(move |g, ids| {
                    let o = g.scale(ids[0], c)?;
                    weighted(g, o, &w)
                }),
            )
        }),
    ));
    table.push((
        "add_row_bias",
        check_op("add_row_bias", cases, |rng| {
            let x = uniform(rng, &[3, 4], -2.0, 2.0);
            let b = uniform(rng, &[4], -1.0, 1.0);
            let w = uniform(rng, &[3, 4], -1.0, 1.0);
            (
                vec![x, b],
                Box::new(move |g, ids| {
                    let o = g.add_row_bias(ids[0], ids[1])?;
                    weighted(g, o, &w)
                }),
            )
        }),
    ));
    table.push((
        "matmul",
        check_op("matmul", cases, |rng| {
            let a = uniform(rng, &[3, 4], -1.5, 1.5);
            let b = uniform(rng, &[4, 2], -1.5, 1.5);
            let w = uniform(rng, &[3, 2], -1.0, 1.0);
            (
                vec![a, b],
                Box::new(move |g, ids| {
                    let o = g.matmul(ids[0], ids[1])?;
                    weighted(g, o, &w)
                }),
            )
        }),
    ));
    table.push((
        "conv2d",
        check_op("conv2d", cases, |rng| {
            let (cin, cout) = (rng.gen_range(1..3), rng.gen_range(1..3));
            let k = if rng.gen_bool(0.5) { 1 } else { 3 };
            let stride = rng.gen_range(1..3);
            let pad = rng.gen_range(0..2);
            let (h, w) = (rng.gen_range(5..8), rng.gen_range(5..8));
            let (oh, ow) = ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1);
            let x = uniform(rng, &[2, cin, h, w], -1.0, 1.0);
            let wt = uniform(rng, &[cout, cin, k, k], -1.0, 1.0);
            let rw = uniform(rng, &[2, cout, oh, ow], -1.0, 1.0);
            (
                vec![x, wt],
                Box::new(move |g, ids| {
                    let o = g.conv2d(ids[0], ids[1], stride, pad)?;
                    weighted(g, o, &rw)
                }),
            )
        }),
    ));
    table.push((
        "batch_norm_train",
        check_op("batch_norm_train", cases, |rng| {
            let x = uniform(rng, &[4, 3, 2, 2], -1.0, 1.0);
            let gamma = uniform(rng, &[3], 0.5, 1.5);
            let beta = uniform(rng, &[3], -0.5, 0.5);
            let w = uniform(rng, &[4, 3, 2, 2], -1.0, 1.0);
            (
                vec![x, gamma, beta],
                Box::new(move |g, ids| {
                    let o = g.batch_norm_train(ids[0], ids[1], ids[2], None, 1e-5, 0.1)?;
                    weighted(g, o, &w)
                }),
            )
        }),
    ));
    table.push((
        "batch_norm_eval",
        check_op("batch_norm_eval", cases, |rng| {
            let x = uniform(rng, &[4, 3, 2, 2], -1.0, 1.0);
            let gamma = uniform(rng, &[3], 0.5, 1.5);
            let beta = uniform(rng, &[3], -0.5, 0.5);
            let rm: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let rv: Vec<f64> = (0..3).map(|_| rng.gen_range(0.5..1.5)).collect();
            let w = uniform(rng, &[4, 3, 2, 2], -1.0, 1.0);
            (
                vec![x, gamma, beta],
                Box::new(move |g, ids| {
                    let o = g.batch_norm_eval(ids[0], ids[1], ids[2], &rm, &rv, 1e-5)?;
                    weighted(g, o, &w)
                }),
            )
        }),
    ));
    // Activation inputs stay at least 0.05 from the kink at zero, which is
    // far beyond the 1e-4 probe step.
    table.push((
        "relu",
        check_op("relu", cases, |rng| {
            let x = kink_free(rng, &[3, 4], 0.05, 2.0);
            let w = uniform(rng, &[3, 4], -1.0, 1.0);
            (
                vec![x],
                Box::new(move |g, ids| {
                    let o = g.activation(ids[0], Activation::Relu, 0.0)?;
                    weighted(g, o, &w)
                }),
            )
        }),
    ));
    table.push((
        "leaky_relu",
        check_op("leaky_relu", cases, |rng| {
            let x = kink_free(rng, &[3, 4], 0.05, 2.0);
            let w = uniform(rng, &[3, 4], -1.0, 1.0);
            (
                vec![x],
                Box::new(move |g, ids| {
                    let o = g.activation(ids[0], Activation::LeakyRelu, 0.01)?;
                    weighted(g, o, &w)
                }),
            )
        }),
    ));
    // Clamp inputs keep a 0.05 margin to both edges from either side.
    table.push((
        "clamp",
        check_op("clamp", cases, |rng| {
            let x = Tensor::from_fn(&[3, 4], |_| {
                if rng.gen_bool(0.6) {
                    rng.gen_range(-0.65..0.65)
                } else {
                    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                    sign * rng.gen_range(0.75..1.5)
                }
            });
            let w = uniform(rng, &[3, 4], -1.0, 1.0);
            (
                vec![x],
                Box::new(move |g, ids| {
                    let o = g.clamp(ids[0], -0.7, 0.7)?;
                    weighted(g, o, &w)
                }),
            )
        }),
    ));
    table.push((
        "sum",
        check_op("sum", cases, |rng| {
            let x = uniform(rng, &[2, 5], -2.0, 2.0);
            (vec![x], Box::new(move |g, ids| g.sum(ids[0])))
        }),
    ));
    table.push((
        "mean_spatial",
        check_op("mean_spatial", cases, |rng| {
            let x = uniform(rng, &[2, 3, 4, 5], -2.0, 2.0);
            let w = uniform(rng, &[2, 3], -1.0, 1.0);
            (
                vec![x],
                Box::new(move |g, ids| {
                    let o = g.mean_spatial(ids[0])?;
                    weighted(g, o, &w)
                }),
            )
        }),
    ));
    table.push((
        "softmax",
        check_op("softmax", cases, |rng| {
            let x = uniform(rng, &[3, 5], -3.0, 3.0);
            let w = uniform(rng, &[3, 5], -1.0, 1.0);
            (
                vec![x],
                Box::new(move |g, ids| {
                    let o = g.softmax(ids[0])?;
                    weighted(g, o, &w)
                }),
            )
        }),
    ));
    table.push((
        "cross_entropy",
        check_op("cross_entropy", cases, |rng| {
            let x = uniform(rng, &[3, 5], -3.0, 3.0);
            let labels: Vec<usize> = (0..3).map(|_| rng.gen_range(0..5)).collect();
            (vec![x], Box::new(move |g, ids| g.cross_entropy(ids[0], &labels)))
        }),
    ));
    table.push((
        "l2_normalize_rows",
        check_op("l2_normalize_rows", cases, |rng| {
            let x = row_normed(rng, 3, 4);
            let w = uniform(rng, &[3, 4], -1.0, 1.0);
            (
                vec![x],
                Box::new(move |g, ids| {
                    let o = g.l2_normalize_rows(ids[0])?;
                    weighted(g, o, &w)
                }),
            )
        }),
    ));
    table.push((
        "l2_normalize_cols",
        check_op("l2_normalize_cols", cases, |rng| {
            let x = col_normed(rng, 4, 3);
            let w = uniform(rng, &[4, 3], -1.0, 1.0);
            (
                vec![x],
                Box::new(move |g, ids| {
                    let o = g.l2_normalize_cols(ids[0])?;
                    weighted(g, o, &w)
                }),
            )
        }),
    ));
    // Cosines stay inside [-0.9, 0.9]: away from the acos domain edges and
    // from the shifted-angle fold at pi.
    table.push((
        "angular_margin",
        check_op("angular_margin", cases, |rng| {
            let x = uniform(rng, &[3, 4], -0.9, 0.9);
            let labels: Vec<usize> = (0..3).map(|_| rng.gen_range(0..4)).collect();
            let w = uniform(rng, &[3, 4], -1.0, 1.0);
            (
                vec![x],
                Box::new(move |g, ids| {
                    let o = g.angular_margin(ids[0], &labels, 0.3)?;
                    weighted(g, o, &w)
                }),
            )
        }),
    ));

    let ops_worst = table.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let net_worst = desk_network_fd_worst();
    let elapsed = start.elapsed().as_secs_f64();
    assert!(
        elapsed < 120.0,
        "gradient suite took {elapsed:.1}s, budget is 120s"
    );
    println!(
        "criterion 1: {} ops x {cases} cases worst {ops_worst:.2e}, desk network worst {net_worst:.2e}, {elapsed:.1}s",
        table.len()
    );
}

// ---------------------------------------------------------------------------
// criterion 2: joint loss identities

#[test]
fn criterion_2_joint_loss_identities() {
    let p = ArcParams::default();

    // Zero center weight collapses the joint loss onto the classification
    // loss, node for node and bit for bit; the joint total is also exactly
    // linear in the center weight.
    for case in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(hash_id("identity"), case));
        let emb = row_normed(&mut rng, 4, 8);
        let head = ArcHead::new(8, 3, 2000 + case).expect("head");
        let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..3)).collect();
        let mut bank = CenterBank::new(3, 8, 0.5).expect("bank");
        let warmup = row_normed(&mut rng, 3, 8);
        bank.update(&warmup, &[0, 1, 2]).expect("center update");

        let mut g = Graph::new();
        let e = g.var(emb.clone()).expect("emb var");
        let w = g.var(head.weight.clone()).expect("weight var");
        let nodes = joint_loss(&mut g, e, w, &bank, &labels, p, 0.0).expect("joint");
        assert_eq!(nodes.total, nodes.arc, "zero weight must reuse the classification node");
        let arc_item = g.tensor(nodes.arc).item();
        let center_item = g.tensor(nodes.center).item();

        let mut g2 = Graph::new();
        let e2 = g2.var(emb.clone()).expect("emb var");
        let w2 = g2.var(head.weight.clone()).expect("weight var");
        let plain = arcface_loss(&mut g2, e2, w2, &labels, p).expect("classification loss");
        assert_eq!(
            arc_item.to_bits(),
            g2.tensor(plain.arc).item().to_bits(),
            "joint at zero weight must equal the classification loss exactly"
        );

        for lambda in [0.001, 0.0411, 0.5, 1.0, 2.5] {
            let mut gl = Graph::new();
            let el = gl.var(emb.clone()).expect("emb var");
            let wl = gl.var(head.weight.clone()).expect("weight var");
            let n = joint_loss(&mut gl, el, wl, &bank, &labels, p, lambda).expect("joint");
            assert_eq!(gl.tensor(n.arc).item().to_bits(), arc_item.to_bits());
            assert_eq!(gl.tensor(n.center).item().to_bits(), center_item.to_bits());
            assert_eq!(
                gl.tensor(n.total).item().to_bits(),
                (arc_item + lambda * center_item).to_bits(),
                "total must be classification plus lambda times center, exactly"
            );
        }
    }

    // The center penalty is zero exactly when every normalized embedding
    // sits on its class center, and strictly positive otherwise. Axis
    // centers have norm exactly 1, so normalization is a bitwise identity.
    let mut bank = CenterBank::new(2, 6, 0.5).expect("bank");
    let mut centers = vec![0.0; 12];
    centers[0] = 1.0;
    centers[7] = 1.0;
    bank.centers = Tensor::new(vec![2, 6], centers).expect("centers");
    let labels = [0usize, 1, 0, 1];
    let mut emb_data = vec![0.0; 24];
    for (i, &y) in labels.iter().enumerate() {
        emb_data[i * 6 + y] = 1.0;
    }
    let emb = Tensor::new(vec![4, 6], emb_data).expect("embeddings");
    let head = ArcHead::new(6, 2, 77).expect("head");

    let mut g = Graph::new();
    let e = g.var(emb.clone()).expect("emb var");
    let w = g.var(head.weight.clone()).expect("weight var");
    let nodes = joint_loss(&mut g, e, w, &bank, &labels, p, 0.7).expect("joint");
    assert_eq!(g.tensor(nodes.center).item(), 0.0, "embeddings at centers give zero penalty");
    assert_eq!(
        g.tensor(nodes.total).item().to_bits(),
        g.tensor(nodes.arc).item().to_bits(),
        "a zero penalty adds nothing to the total"
    );

    let mut rng = ChaCha8Rng::seed_from_u64(hash_id("perturb"));
    for _ in 0..20 {
        let row = rng.gen_range(0..4);
        let axis = labels[row];
        let coord = (axis + 1 + rng.gen_range(0..5)) % 6;
        let mut off = emb.clone();
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        off.data[row * 6 + coord] += sign * rng.gen_range(0.05..0.5);
        let mut gp = Graph::new();
        let ep = gp.var(off).expect("emb var");
        let wp = gp.var(head.weight.clone()).expect("weight var");
        let np = joint_loss(&mut gp, ep, wp, &bank, &labels, p, 0.7).expect("joint");
        assert!(
            gp.tensor(np.center).item() > 0.0,
            "moving any embedding off its center must cost a positive penalty"
        );
    }

    // The classification loss is strictly positive: softmax probabilities
    // never reach 1 with finite logits.
    for case in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(hash_id("positive"), case));
        let emb = row_normed(&mut rng, 3, 5);
        let head = ArcHead::new(5, 4, 4000 + case).expect("head");
        let labels: Vec<usize> = (0..3).map(|_| rng.gen_range(0..4)).collect();
        let mut g = Graph::new();
        let e = g.var(emb).expect("emb var");
        let w = g.var(head.weight.clone()).expect("weight var");
        let nodes = arcface_loss(&mut g, e, w, &labels, p).expect("classification loss");
        assert!(g.tensor(nodes.arc).item() > 0.0, "classification loss must stay positive");
    }

    // Margin ordering over an angle sweep kept inside the smooth region:
    // cosines within [-0.9, 0.9] and shifted angles below pi.
    let ident = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).expect("identity weight");
    for i in 0..=60 {
        let theta = 0.46 + (2.60 - 0.46) * (i as f64 / 60.0);
        let emb = Tensor::new(vec![1, 2], vec![theta.cos(), theta.sin()]).expect("embedding");
        let mut lm = 0.0;
        let mut l0 = 0.0;
        for (margin, out) in [(0.3, &mut lm), (0.0, &mut l0)] {
            let mut g = Graph::new();
            let e = g.var(emb.clone()).expect("emb var");
            let w = g.var(ident.clone()).expect("weight var");
            let nodes =
                arcface_loss(&mut g, e, w, &[0], ArcParams { scale: 30.0, margin })
                    .expect("classification loss");
            *out = g.tensor(nodes.arc).item();
        }
        assert!(
            lm >= l0,
            "margin must not lower the loss: at theta {theta:.3} got {lm} vs {l0}"
        );
    }
    println!("criterion 2: identity, linearity, center-zero, positivity, margin ordering hold");
}

// ---------------------------------------------------------------------------
// criterion 3: metric oracles

fn oracle_frac_ge(scores: &[f64], t: f64) -> f64 {
    scores.iter().filter(|&&s| s >= t).count() as f64 / scores.len() as f64
}

fn oracle_roc(set: &ScoreSet) -> Vec<RocPoint> {
    let pooled: Vec<f64> = set.attacks.values().flatten().copied().collect();
    let mut thr: Vec<f64> = set.bona.iter().chain(pooled.iter()).copied().collect();
    thr.sort_by(|a, b| b.partial_cmp(a).expect("finite scores"));
    thr.dedup();
    let mut pts = vec![RocPoint { threshold: f64::INFINITY, fp: 0, tp: 0 }];
    for &t in &thr {
        pts.push(RocPoint {
            threshold: t,
            fp: pooled.iter().filter(|&&s| s >= t).count(),
            tp: set.bona.iter().filter(|&&s| s >= t).count(),
        });
    }
    pts.push(RocPoint {
        threshold: f64::NEG_INFINITY,
        fp: pooled.len(),
        tp: set.bona.len(),
    });
    pts
}

fn random_set(rng: &mut ChaCha8Rng, mode: u64) -> ScoreSet {
    let draw = |rng: &mut ChaCha8Rng| -> f64 {
        match mode % 3 {
            // Coarse grid scores force ties across and within classes.
            0 => rng.gen_range(0..=10) as f64 / 10.0,
            1 => rng.gen::<f64>(),
            _ => {
                if rng.gen_bool(0.5) {
                    rng.gen_range(0..=10) as f64 / 10.0
                } else {
                    rng.gen::<f64>()
                }
            }
        }
    };
    let mut set = ScoreSet::new();
    for _ in 0..rng.gen_range(1..=10) {
        set.push_bona(draw(rng)).expect("bona score");
    }
    let names = ["alpha", "beta", "gamma"];
    for species in names.iter().take(rng.gen_range(1..=3)) {
        for _ in 0..rng.gen_range(1..=6) {
            set.push_attack(species, draw(rng)).expect("attack score");
        }
    }
    set
}

#[test]
fn criterion_3_metric_oracles() {
    let start = Instant::now();
    let mut tie_free_sets = 0usize;
    let total_sets = 600u64;
    for case in 0..total_sets {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(hash_id("metrics"), case));
        let set = random_set(&mut rng, case);
        let pooled: Vec<f64> = set.attacks.values().flatten().copied().collect();

        // Rates at every distinct score, every midpoint, and fixed outside
        // points, against direct counting.
        let mut cand: Vec<f64> = set.bona.iter().chain(pooled.iter()).copied().collect();
        cand.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
        cand.dedup();
        let mids: Vec<f64> = cand.windows(2).map(|w| (w[0] + w[1]) / 2.0).collect();
        cand.extend(mids);
        cand.extend([-0.5, 0.0, 0.25, 0.5, 1.0, 1.5]);
        for &t in &cand {
            for scores in set.attacks.values() {
                let lib = apcer(scores, t).expect("apcer");
                assert_eq!(lib.to_bits(), oracle_frac_ge(scores, t).to_bits());
            }
            let lib_bpcer = bpcer(&set.bona, t).expect("bpcer");
            let oracle_bpcer =
                set.bona.iter().filter(|&&s| s < t).count() as f64 / set.bona.len() as f64;
            assert_eq!(lib_bpcer.to_bits(), oracle_bpcer.to_bits());

            let mut apcer_sum = 0.0;
            for scores in set.attacks.values() {
                apcer_sum += oracle_frac_ge(scores, t);
            }
            let oracle_acer =
                (apcer_sum / set.attacks.len() as f64 + oracle_bpcer) / 2.0;
            assert_eq!(acer(&set, t).expect("acer").to_bits(), oracle_acer.to_bits());
        }

        // Full curve against an independent reconstruction.
        let curve = roc(&set).expect("roc");
        let opts = oracle_roc(&set);
        assert_eq!(curve.points.len(), opts.len(), "curve length");
        for (a, b) in curve.points.iter().zip(&opts) {
            assert_eq!(a.threshold.to_bits(), b.threshold.to_bits());
            assert_eq!((a.fp, a.tp), (b.fp, b.tp));
        }
        assert_eq!(curve.bona_total, set.bona.len());
        assert_eq!(curve.attack_total, pooled.len());

        // Area under the curve against a naive pairwise count, and the
        // win-fraction form when no scores collide.
        let (mut wins, mut ties) = (0u128, 0u128);
        for &a in &pooled {
            for &b in &set.bona {
                if b > a {
                    wins += 1;
                } else if b == a {
                    ties += 1;
                }
            }
        }
        let p = set.bona.len() as u128;
        let n = pooled.len() as u128;
        let oracle_auc = (2 * wins + ties) as f64 / ((2 * p * n) as f64);
        assert_eq!(curve.auc().to_bits(), oracle_auc.to_bits());
        assert_eq!(auc_pairwise(&set).expect("pairwise").to_bits(), oracle_auc.to_bits());

        let mut all: Vec<u64> = set.bona.iter().chain(pooled.iter()).map(|s| s.to_bits()).collect();
        all.sort_unstable();
        all.dedup();
        if all.len() == set.bona.len() + pooled.len() {
            tie_free_sets += 1;
            assert_eq!(ties, 0);
            assert_eq!(
                curve.auc().to_bits(),
                (wins as f64 / (p * n) as f64).to_bits(),
                "tie-free area must equal the plain win fraction"
            );
        }

        // Operating point at a pooled-rate target against a direct scan.
        for target in [0.0, 0.05, 0.1, 0.25, 0.5, 1.0] {
            let lib = bpcer_at_apcer(&set, target).expect("bpcer_at");
            let mut grid: Vec<f64> = set.bona.iter().chain(pooled.iter()).copied().collect();
            grid.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
            grid.dedup();
            grid.push(f64::INFINITY);
            let t = grid
                .iter()
                .copied()
                .find(|&t| oracle_frac_ge(&pooled, t) <= target)
                .expect("sentinel always qualifies");
            let oracle = BpcerAt {
                target,
                threshold: t,
                bpcer: set.bona.iter().filter(|&&s| s < t).count() as f64
                    / set.bona.len() as f64,
                unattainable: t == f64::INFINITY,
            };
            assert_eq!(lib, oracle);
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(tie_free_sets >= 100, "only {tie_free_sets} tie-free sets were generated");
    assert!(elapsed < 60.0, "metric oracle suite took {elapsed:.1}s, budget is 60s");
    println!(
        "criterion 3: {total_sets} score sets ({tie_free_sets} tie-free) match every oracle, {elapsed:.1}s"
    );
}

// ---------------------------------------------------------------------------
// criterion 4: error-rate arithmetic

#[test]
fn criterion_4_error_rate_arithmetic() {
    // Percent-scale reproduction: a species accepted at 0.63% with bona
    // fide rejection at 0.12% must average to exactly 0.375%.
    let mut set = ScoreSet::new();
    for i in 0..10_000 {
        set.push_bona(if i < 12 { 0.4 } else { 0.6 }).expect("bona");
    }
    for i in 0..10_000 {
        set.push_attack("film", if i < 63 { 0.6 } else { 0.4 }).expect("attack");
    }
    let report = evaluate(&set, 0.5, &[]).expect("evaluate");
    assert_eq!(report.apcer_mean, 0.0063);
    assert_eq!(report.bpcer, 0.0012);
    assert_eq!(report.acer, 0.00375);

    // The two-decimal rendering rule sits on a tie at 0.375 and must land
    // on 0.37 or 0.38; ties to even gives 0.38.
    let rendered = round_half_even2(0.375);
    assert!(rendered == 0.37 || rendered == 0.38);
    assert_eq!(rendered, 0.38);

    // Same digits on the fraction scale, flowing through the full report
    // renderer: machine output keeps 0.375 exactly, human output prints
    // the rounded 0.38.
    let mut frac = ScoreSet::new();
    for i in 0..100 {
        frac.push_bona(if i < 12 { 0.4 } else { 0.6 }).expect("bona");
    }
    for i in 0..100 {
        frac.push_attack("film", if i < 63 { 0.6 } else { 0.4 }).expect("attack");
    }
    let report = evaluate(&frac, 0.5, &[]).expect("evaluate");
    assert_eq!(report.apcer_mean, 0.63);
    assert_eq!(report.bpcer, 0.12);
    assert_eq!(report.acer, 0.375);
    assert!(report.render_machine().contains("acer=0.375\n"));
    assert!(report.render_human().contains("acer        0.38\n"));
    println!("criterion 4: 0.63 and 0.12 average to 0.375 exactly and render as 0.38");
}

// ---------------------------------------------------------------------------
// criterion 5: end-to-end protocol on unseen species

/// Corpus shape for the end-to-end and sweep protocols: desk scale, strong
/// enough corruption that the species sit clearly off the live manifold.
const E2E_GEN: &[&str] = &[
    "--subjects",
    "26",
    "--per-subject",
    "8",
    "--synthetic",
    "120",
    "--warp-amplitude",
    "0.10",
    "--modulation-depth",
    "0.6",
    "--corruption-strength",
    "1.5",
    "--noise-sigma",
    "0.015",
];

fn e2e_seed_dirs(root: &Path, seed: u64) -> (PathBuf, PathBuf) {
    let d = root.join(format!("seed{seed}"));
    (d.join("data"), d)
}

fn run_protocol(root: &Path, seed: u64, train_extra: &[&str], arm: &str) -> (f64, f64) {
    let (data, d) = e2e_seed_dirs(root, seed);
    let manifest = data.join("manifest.jsonl");
    if !manifest.exists() {
        let mut gen = args(&["gen", "--out", &pstr(&data), "--seed", &seed.to_string()]);
        gen.extend(E2E_GEN.iter().map(|s| s.to_string()));
        padkit_run(&gen);
    }
    let run = d.join(format!("run_{arm}"));
    let ev = d.join(format!("eval_{arm}"));
    let mut train = args(&[
        "train",
        "--out",
        &pstr(&run),
        "--manifest",
        &pstr(&manifest),
        "--seed",
        &seed.to_string(),
    ]);
    train.extend(train_extra.iter().map(|s| s.to_string()));
    padkit_run(&train);
    padkit_run(&args(&[
        "eval",
        "--out",
        &pstr(&ev),
        "--checkpoint",
        &pstr(&run.join("model.ckpt")),
        "--manifest",
        &pstr(&manifest),
        "--split",
        "test",
    ]));
    let report = ev.join("report.txt");
    (report_value(&report, "acer"), report_value(&report, "auc"))
}

#[test]
fn criterion_5_end_to_end_unseen_species() {
    let root = tempfile::tempdir().expect("tempdir");
    let seeds: Vec<u64> = (0..20).collect();

    // Timed window: generate, train with defaults, evaluate on the test
    // split, whose attack species never appear in training.
    let start = Instant::now();
    let mut main_runs = Vec::new();
    for &seed in &seeds {
        main_runs.push(run_protocol(root.path(), seed, &[], "main"));
    }
    let elapsed = start.elapsed().as_secs_f64();

    let mut lines = String::new();
    let mut passes = 0;
    for (&seed, &(acer, auc)) in seeds.iter().zip(&main_runs) {
        let ok = acer <= 0.05 && auc >= 0.98;
        passes += ok as usize;
        lines.push_str(&format!(
            "seed {seed}: acer {acer:.4} auc {auc:.4} {}\n",
            if ok { "pass" } else { "FAIL" }
        ));
    }
    assert!(
        passes >= 18,
        "{passes}/20 seeds reached acer <= 0.05 and auc >= 0.98:\n{lines}"
    );
    assert!(elapsed < 600.0, "protocol took {elapsed:.1}s over 20 seeds, budget is 600s");

    // Direction checks on the same corpora: the shipped defaults must not
    // lose, on mean ACER, to plain relu or to a disabled center term.
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let main_acer: Vec<f64> = main_runs.iter().map(|r| r.0).collect();
    let relu_acer: Vec<f64> = seeds
        .iter()
        .map(|&s| run_protocol(root.path(), s, &["--activation", "relu"], "relu").0)
        .collect();
    let nolambda_acer: Vec<f64> = seeds
        .iter()
        .map(|&s| run_protocol(root.path(), s, &["--lambda", "0"], "lambda0").0)
        .collect();
    assert!(
        mean(&main_acer) <= mean(&relu_acer),
        "leaky_relu mean acer {} vs relu {}",
        mean(&main_acer),
        mean(&relu_acer)
    );
    assert!(
        mean(&main_acer) <= mean(&nolambda_acer),
        "joint-loss mean acer {} vs classification-only {}",
        mean(&main_acer),
        mean(&nolambda_acer)
    );
    println!(
        "criterion 5: {passes}/20 seeds pass in {elapsed:.0}s; mean acer {:.4} vs relu {:.4} vs no-center {:.4}",
        mean(&main_acer),
        mean(&relu_acer),
        mean(&nolambda_acer)
    );
}

// ---------------------------------------------------------------------------
// criterion 6: sweep selects a positive center weight

#[test]
fn criterion_6_sweep_selects_positive_center_weight() {
    let root = tempfile::tempdir().expect("tempdir");
    // A harder corpus than the end-to-end one: heavier pixel noise and a
    // milder synthetic class keep validation AUC off the ceiling so the
    // grid has a real argmax.
    let gen_knobs = [
        "--subjects",
        "26",
        "--per-subject",
        "6",
        "--synthetic",
        "90",
        "--warp-amplitude",
        "0.05",
        "--modulation-depth",
        "0.4",
        "--noise-sigma",
        "0.06",
    ];
    let mut positive = 0usize;
    let mut lines = String::new();
    for seed in 0..20u64 {
        let d = root.path().join(format!("seed{seed}"));
        let data = d.join("data");
        let out = d.join("sweep");
        let mut gen = args(&["gen", "--out", &pstr(&data), "--seed", &seed.to_string()]);
        gen.extend(gen_knobs.iter().map(|s| s.to_string()));
        padkit_run(&gen);
        padkit_run(&args(&[
            "sweep",
            "--out",
            &pstr(&out),
            "--manifest",
            &pstr(&data.join("manifest.jsonl")),
            "--seed",
            &seed.to_string(),
            "--epochs",
            "10",
        ]));

        let text = std::fs::read_to_string(out.join("sweep.csv")).expect("sweep summary");
        let mut rows: Vec<(f64, f64, bool)> = Vec::new();
        for line in text.lines().skip(1) {
            let mut parts = line.split(',');
            let lambda: f64 = parts.next().expect("lambda").parse().expect("lambda");
            let auc: f64 = parts.next().expect("auc").parse().expect("auc");
            let sel = parts.next().expect("flag") == "1";
            rows.push((lambda, auc, sel));
        }
        let grid: Vec<f64> = rows.iter().map(|r| r.0).collect();
        assert_eq!(grid, DEFAULT_LAMBDA_GRID, "sweep must run the default grid");

        let selected: Vec<&(f64, f64, bool)> = rows.iter().filter(|r| r.2).collect();
        assert_eq!(selected.len(), 1, "exactly one arm is selected");
        let (sel_lambda, sel_auc, _) = *selected[0];
        // Selection is the argmax by construction: nothing scores higher,
        // and ties break toward the smaller lambda.
        for &(lambda, auc, _) in &rows {
            assert!(auc <= sel_auc, "lambda {lambda} has auc {auc} above selected {sel_auc}");
            assert!(
                !(auc == sel_auc && lambda < sel_lambda),
                "tie at auc {auc} must break toward lambda {lambda}, not {sel_lambda}"
            );
        }
        positive += (sel_lambda > 0.0) as usize;
        lines.push_str(&format!("seed {seed}: lambda {sel_lambda} auc {sel_auc:.4}\n"));
    }
    assert!(
        positive >= 15,
        "positive center weight selected on {positive}/20 seeds:\n{lines}"
    );
    println!("criterion 6: positive center weight selected on {positive}/20 seeds");
}

// ---------------------------------------------------------------------------
// criterion 7: byte-identical reruns

fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).expect("read dir") {
            let path = entry.expect("dir entry").path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let key = path
                    .strip_prefix(root)
                    .expect("path under root")
                    .to_string_lossy()
                    .into_owned();
                out.insert(key, std::fs::read(&path).expect("read file"));
            }
        }
    }
    out
}

#[test]
fn criterion_7_reruns_are_byte_identical() {
    let root = tempfile::tempdir().expect("tempdir");
    let base = root.path().join("workspace");
    let run_all = || {
        let data = base.join("data");
        padkit_run(&args(&[
            "gen",
            "--out",
            &pstr(&data),
            "--seed",
            "3",
            "--subjects",
            "8",
            "--per-subject",
            "5",
            "--synthetic",
            "40",
            "--attacks-per-species",
            "6",
        ]));
        padkit_run(&args(&[
            "train",
            "--out",
            &pstr(&base.join("run")),
            "--manifest",
            &pstr(&data.join("manifest.jsonl")),
            "--seed",
            "3",
            "--epochs",
            "6",
        ]));
        padkit_run(&args(&[
            "eval",
            "--out",
            &pstr(&base.join("eval")),
            "--checkpoint",
            &pstr(&base.join("run").join("model.ckpt")),
            "--manifest",
            &pstr(&data.join("manifest.jsonl")),
            "--split",
            "test",
        ]));
    };

    run_all();
    let first = snapshot(&base);
    std::fs::remove_dir_all(&base).expect("clear workspace");
    run_all();
    let second = snapshot(&base);

    let names: Vec<&String> = first.keys().collect();
    assert_eq!(
        names,
        second.keys().collect::<Vec<_>>(),
        "reruns must produce the same file set"
    );
    for (name, bytes) in &first {
        assert!(
            second[name] == *bytes,
            "{name} differs between identically configured runs"
        );
    }
    assert!(first.contains_key("run/model.ckpt"));
    assert!(first.contains_key("eval/scores.csv"));
    assert!(first.contains_key("eval/report.txt"));
    println!("criterion 7: {} files byte-identical across reruns", first.len());
}

// ---------------------------------------------------------------------------
// criterion 8: full-resolution preset

#[test]
fn criterion_8_full_preset_forward() {
    let cfg = NetworkConfig::full();
    let classes = cfg.classes;
    let mut net = Network::new(cfg, 5).expect("full preset builds");
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = Tensor::from_fn(&[1, 3, 1024, 1024], |_| rng.gen_range(0.0..1.0));
    let start = Instant::now();
    let mut g = Graph::new();
    let fp = net.forward(&mut g, x, false).expect("forward");
    let elapsed = start.elapsed().as_secs_f64();

    assert_eq!(
        g.tensor(fp.prepool).shape,
        vec![1, 512, 32, 32],
        "pre-pool feature map must carry 512 channels"
    );
    let probs = g.tensor(fp.probs);
    assert_eq!(probs.shape, vec![1, classes]);
    let sum: f64 = probs.data.iter().sum();
    assert!((sum - 1.0).abs() < 1e-12, "softmax row sums to {sum}");
    assert!(probs.data.iter().all(|p| p.is_finite() && (0.0..=1.0).contains(p)));
    println!("criterion 8: full preset forward in {elapsed:.1}s, output row sums to 1");
}
