mod common;

use common::{images, random_tensor, tiny_model};
use concepthash::centers::CenterMode;
use concepthash::objective::{loss_cd, loss_clf, loss_csd, loss_quan, CsdMode, LossConfig};
use concepthash::tensor::{grad_check, Tape, Tensor, Var};
use concepthash::Result;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Reduces `y` to a scalar with fixed random weights so every output
/// coordinate contributes a distinct amount.
fn weighted(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let w = tape.constant(random_tensor(tape.shape(y), seed, -1.0, 1.0));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn check(name: &str, x: &Tensor, f: impl Fn(&mut Tape, Var) -> Result<Var>) {
    let report = grad_check(f, x, H, TOL).unwrap();
    assert!(
        report.passed,
        "{name}: max relative error {:.3e} at {}",
        report.max_rel_error, report.worst_index
    );
}

#[test]
fn elementwise_and_shape_ops() {
    let x = random_tensor(&[2, 3, 4], 1, -2.0, 2.0);
    let other = random_tensor(&[2, 3, 4], 2, -2.0, 2.0);
    let row = random_tensor(&[4], 3, -2.0, 2.0);
    check("add", &x, |t, v| {
        let o = t.constant(other.clone());
        let y = t.add(v, o)?;
        weighted(t, y, 10)
    });
    check("add broadcast rhs", &row, |t, v| {
        let o = t.constant(x.clone());
        let y = t.add(o, v)?;
        weighted(t, y, 11)
    });
    check("sub", &x, |t, v| {
        let o = t.constant(other.clone());
        let y = t.sub(o, v)?;
        weighted(t, y, 12)
    });
    check("mul", &x, |t, v| {
        let y = t.mul(v, v)?;
        weighted(t, y, 13)
    });
    check("scale_by", &Tensor::scalar(0.7), |t, s| {
        let o = t.constant(x.clone());
        let y = t.scale_by(o, s)?;
        weighted(t, y, 14)
    });
    check("permute", &x, |t, v| {
        let y = t.permute(v, &[2, 0, 1])?;
        weighted(t, y, 15)
    });
    check("narrow", &x, |t, v| {
        let y = t.narrow(v, 2, 1, 2)?;
        weighted(t, y, 16)
    });
    check("concat", &x, |t, v| {
        let o = t.constant(other.clone());
        let y = t.concat(o, v, 1)?;
        weighted(t, y, 17)
    });
    check("broadcast", &row, |t, v| {
        let y = t.broadcast(v, 3);
        weighted(t, y, 18)
    });
    check("mean_axis", &x, |t, v| {
        let y = t.mean_axis(v, 1)?;
        weighted(t, y, 19)
    });
    check("gelu", &x, |t, v| {
        let y = t.gelu(v);
        weighted(t, y, 20)
    });
}

#[test]
fn matrix_ops() {
    let a = random_tensor(&[3, 4], 1, -1.0, 1.0);
    let b = random_tensor(&[4, 5], 2, -1.0, 1.0);
    check("matmul lhs", &a, |t, v| {
        let o = t.constant(b.clone());
        let y = t.matmul(v, o)?;
        weighted(t, y, 30)
    });
    check("matmul rhs", &b, |t, v| {
        let o = t.constant(a.clone());
        let y = t.matmul(o, v)?;
        weighted(t, y, 31)
    });
    let q = random_tensor(&[2, 3, 4], 3, -1.0, 1.0);
    let k = random_tensor(&[2, 5, 4], 4, -1.0, 1.0);
    check("batch_matmul trans_b", &q, |t, v| {
        let o = t.constant(k.clone());
        let y = t.batch_matmul(v, o, true)?;
        weighted(t, y, 32)
    });
    check("batch_matmul self", &q, |t, v| {
        let y = t.batch_matmul(v, v, true)?;
        weighted(t, y, 33)
    });
    let kt = random_tensor(&[2, 4, 5], 5, -1.0, 1.0);
    check("batch_matmul plain", &q, |t, v| {
        let o = t.constant(kt.clone());
        let y = t.batch_matmul(v, o, false)?;
        weighted(t, y, 34)
    });
}

#[test]
fn normalization_ops() {
    let x = random_tensor(&[3, 6], 1, -3.0, 3.0);
    check("softmax", &x, |t, v| {
        let y = t.softmax(v);
        weighted(t, y, 40)
    });
    check("log_softmax", &x, |t, v| {
        let y = t.log_softmax(v);
        weighted(t, y, 41)
    });
    check("l2_normalize", &x, |t, v| {
        let y = t.l2_normalize(v, 1e-8);
        weighted(t, y, 42)
    });
    let gamma = random_tensor(&[6], 2, 0.5, 1.5);
    let beta = random_tensor(&[6], 3, -0.5, 0.5);
    check("layer_norm x", &x, |t, v| {
        let (g, b) = (t.constant(gamma.clone()), t.constant(beta.clone()));
        let y = t.layer_norm(v, g, b, 1e-5)?;
        weighted(t, y, 43)
    });
    check("layer_norm gamma", &gamma, |t, g| {
        let (xv, b) = (t.constant(x.clone()), t.constant(beta.clone()));
        let y = t.layer_norm(xv, g, b, 1e-5)?;
        weighted(t, y, 44)
    });
    check("layer_norm beta", &beta, |t, b| {
        let (xv, g) = (t.constant(x.clone()), t.constant(gamma.clone()));
        let y = t.layer_norm(xv, g, b, 1e-5)?;
        weighted(t, y, 45)
    });
    check("pick", &x, |t, v| {
        let y = t.pick(v, &[5, 0, 2])?;
        weighted(t, y, 46)
    });
}

#[test]
fn loss_terms() {
    let tau = 0.125;
    let labels = [2, 0, 3];
    let codes = random_tensor(&[3, 8], 1, -1.0, 1.0);
    let centers = random_tensor(&[4, 8], 2, -1.0, 1.0);
    check("clf codes", &codes, |t, v| {
        let o = t.constant(centers.clone());
        loss_clf(t, v, &labels, o, tau)
    });
    check("clf centers", &centers, |t, o| {
        let c = t.constant(codes.clone());
        loss_clf(t, c, &labels, o, tau)
    });
    check("quan codes", &codes, |t, v| {
        loss_quan(t, v, &labels, &centers, tau)
    });

    let attn = random_tensor(&[2, 3, 5], 3, 0.01, 1.0);
    check("csd per-sample", &attn, |t, a| loss_csd(t, a, CsdMode::PerSample));
    check("csd flattened", &attn, |t, a| {
        loss_csd(t, a, CsdMode::BatchFlattened)
    });

    let features = random_tensor(&[3, 2, 6], 4, -1.0, 1.0);
    let e = random_tensor(&[2, 6], 5, -0.5, 0.5);
    let w = random_tensor(&[4, 6], 6, -1.0, 1.0);
    check("cd features", &features, |t, f| {
        let (ev, wv) = (t.constant(e.clone()), t.constant(w.clone()));
        loss_cd(t, f, ev, &labels, wv, tau)
    });
    check("cd specificity", &e, |t, ev| {
        let (f, wv) = (t.constant(features.clone()), t.constant(w.clone()));
        loss_cd(t, f, ev, &labels, wv, tau)
    });
    check("cd weights", &w, |t, wv| {
        let (f, ev) = (t.constant(features.clone()), t.constant(e.clone()));
        loss_cd(t, f, ev, &labels, wv, tau)
    });
}

/// Every coordinate of every trainable parameter of the tiny model.
fn full_model_check(mode: CenterMode) -> (f64, usize) {
    let model = tiny_model(mode, 3);
    let x = images(2, 16, 8);
    let labels = [1, 3];
    let cfg = LossConfig::default();
    let loss_at = |m: &concepthash::model::ConceptHash| {
        let mut tape = Tape::new();
        let b = m.params.bind(&mut tape);
        let out = m.loss(&mut tape, &b, &x, &labels, &cfg).unwrap();
        tape.value(out.total).data()[0]
    };
    let mut tape = Tape::new();
    let binding = model.params.bind(&mut tape);
    let out = model.loss(&mut tape, &binding, &x, &labels, &cfg).unwrap();
    tape.backward(out.total).unwrap();
    let grads = binding.gradients(&tape);

    // Below this magnitude a central difference only sees loss roundoff;
    // such coordinates (e.g. key biases, which softmax ignores) are held to
    // an absolute bound instead.
    let resolution = 64.0 * f64::EPSILON * loss_at(&model).abs().max(1.0) / H;
    let mut probe = model.clone();
    let (mut worst, mut count) = (0.0f64, 0);
    let names: Vec<(String, bool)> = model
        .params
        .iter()
        .map(|p| (p.name.clone(), p.trainable))
        .collect();
    for ((name, trainable), g) in names.iter().zip(&grads) {
        if !trainable {
            continue;
        }
        let g = g.as_ref().unwrap_or_else(|| panic!("{name} has no gradient"));
        for i in 0..g.numel() {
            let orig = model.params.get(name).unwrap().value.data()[i];
            probe.params.get_mut(name).unwrap().value.data_mut()[i] = orig + H;
            let up = loss_at(&probe);
            probe.params.get_mut(name).unwrap().value.data_mut()[i] = orig - H;
            let down = loss_at(&probe);
            probe.params.get_mut(name).unwrap().value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * H);
            let a = g.data()[i];
            let diff = (a - numeric).abs();
            if a.abs().max(numeric.abs()) < resolution {
                assert!(
                    diff < resolution,
                    "{name}[{i}]: analytic {a:.6e}, numeric {numeric:.6e}"
                );
            } else {
                let rel = diff / a.abs().max(numeric.abs()).max(1e-6);
                assert!(rel <= TOL, "{name}[{i}]: analytic {a:.6e}, numeric {numeric:.6e}");
                worst = worst.max(rel);
            }
            count += 1;
        }
    }
    (worst, count)
}

#[test]
fn full_model_language_centers() {
    let (worst, count) = full_model_check(CenterMode::Language);
    assert!(count > 10_000);
    assert!(worst <= TOL);
}

#[test]
fn full_model_learnable_centers() {
    let (worst, _) = full_model_check(CenterMode::Learnable);
    assert!(worst <= TOL);
}
