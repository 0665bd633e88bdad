//! Finite-difference verification of every differentiable op and of the
//! contrastive, distillation and combined objectives.

use serde::Serialize;

use crate::encoder::{EncoderConfig, EncoderParams, CONV1, CONV2, HEAD1_B, HEAD1_W};
use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{finite_diff_gradient, ops, relative_error, Graph, NodeId, Tensor};

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-5;
/// Pre-activations closer than this to a relu kink cause a redraw.
pub const KINK_MARGIN: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckRow {
    pub name: String,
    pub instances: usize,
    pub redraws: usize,
    pub max_rel_error: f64,
}

impl GradcheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }
}

type Build = Box<dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>>;

struct Instance {
    inputs: Vec<Tensor>,
    build: Build,
}

fn eval(inst: &Instance, inputs: &[Tensor]) -> Result<f64> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = (inst.build)(&mut g, &ids)?;
    g.value(out).item()
}

/// Worst relative error over all inputs of one instance.
fn check(inst: &Instance) -> Result<f64> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inst.inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = (inst.build)(&mut g, &ids)?;
    let grads = g.backward(out)?;
    let mut worst: f64 = 0.0;
    for (i, id) in ids.iter().enumerate() {
        let analytic = grads
            .wrt(*id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inst.inputs[i].shape()));
        let numeric = finite_diff_gradient(
            |x| {
                let mut v = inst.inputs.clone();
                v[i] = x.clone();
                eval(inst, &v).expect("perturbed forward")
            },
            &inst.inputs[i],
            STEP,
        );
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

fn rand_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.range(lo, hi)).collect()).expect("shape")
}

fn unit_rows(rows: usize, d: usize, rng: &mut Rng) -> Tensor {
    let raw = Tensor::new(vec![rows, d], (0..rows * d).map(|_| rng.normal()).collect()).expect("shape");
    ops::l2_normalize(&raw, 1e-12).expect("eps")
}

fn distribution_rows(rows: usize, n: usize, rng: &mut Rng) -> Tensor {
    ops::softmax_with_temperature(&rand_tensor(&[rows, n], -2.0, 2.0, rng), 1.0).expect("tau")
}

fn dim(lo: usize, hi: usize, rng: &mut Rng) -> usize {
    lo + rng.below(hi - lo + 1)
}

/// Wraps a tensor-valued op into a scalar probe with random weights.
fn weighted(w: Tensor, f: impl Fn(&mut Graph, &[NodeId]) -> Result<NodeId> + 'static) -> Build {
    Box::new(move |g, ids| {
        let y = f(g, ids)?;
        g.weighted_sum(y, &w)
    })
}

fn with_weights(
    inputs: Vec<Tensor>,
    out_shape: &[usize],
    rng: &mut Rng,
    f: impl Fn(&mut Graph, &[NodeId]) -> Result<NodeId> + 'static,
) -> Option<Instance> {
    let w = rand_tensor(out_shape, -1.0, 1.0, rng);
    Some(Instance {
        inputs,
        build: weighted(w, f),
    })
}

fn gen_affine(rng: &mut Rng) -> Option<Instance> {
    let (b, i, o) = (dim(1, 4, rng), dim(1, 5, rng), dim(1, 5, rng));
    let inputs = vec![
        rand_tensor(&[b, i], -1.0, 1.0, rng),
        rand_tensor(&[i, o], -1.0, 1.0, rng),
        rand_tensor(&[o], -1.0, 1.0, rng),
    ];
    with_weights(inputs, &[b, o], rng, |g, v| g.affine(v[0], v[1], v[2]))
}

fn gen_conv2d(rng: &mut Rng) -> Option<Instance> {
    let (cin, cout, k) = (dim(1, 3, rng), dim(1, 3, rng), dim(1, 3, rng));
    let (stride, pad) = (dim(1, 2, rng), dim(0, 1, rng));
    let (h, w) = (dim(k.max(3), 6, rng), dim(k.max(3), 6, rng));
    let batched = rng.bernoulli(0.5);
    let xshape = if batched { vec![2, cin, h, w] } else { vec![cin, h, w] };
    let x = rand_tensor(&xshape, -1.0, 1.0, rng);
    let kern = rand_tensor(&[cout, cin, k, k], -1.0, 1.0, rng);
    let out = ops::conv2d(&x, &kern, stride, pad).ok()?;
    let shape = out.shape().to_vec();
    with_weights(vec![x, kern], &shape, rng, move |g, v| g.conv2d(v[0], v[1], stride, pad))
}

fn gen_relu(rng: &mut Rng) -> Option<Instance> {
    let x = rand_tensor(&[dim(1, 3, rng), dim(1, 6, rng)], -1.0, 1.0, rng);
    if x.data().iter().any(|v| v.abs() < 1e-3) {
        return None;
    }
    let shape = x.shape().to_vec();
    with_weights(vec![x], &shape, rng, |g, v| Ok(g.relu(v[0])))
}

fn gen_pool(rng: &mut Rng) -> Option<Instance> {
    let (c, h, w) = (dim(1, 3, rng), dim(1, 4, rng), dim(1, 4, rng));
    let batched = rng.bernoulli(0.5);
    let (xs, ys) = if batched { (vec![2, c, h, w], vec![2, c]) } else { (vec![c, h, w], vec![c]) };
    let x = rand_tensor(&xs, -1.0, 1.0, rng);
    with_weights(vec![x], &ys, rng, |g, v| g.global_avg_pool(v[0]))
}

fn gen_l2(rng: &mut Rng) -> Option<Instance> {
    let x = rand_tensor(&[dim(1, 3, rng), dim(2, 6, rng)], -1.0, 1.0, rng);
    let shape = x.shape().to_vec();
    with_weights(vec![x], &shape, rng, |g, v| g.l2_normalize(v[0], 1e-12))
}

fn gen_softmax(rng: &mut Rng) -> Option<Instance> {
    let tau = rng.range(0.05, 2.0);
    // logits within a few τ of each other; fully saturated rows have gradients below difference noise
    let z = rand_tensor(&[dim(1, 3, rng), dim(2, 6, rng)], -3.0 * tau, 3.0 * tau, rng);
    let shape = z.shape().to_vec();
    with_weights(vec![z], &shape, rng, move |g, v| g.softmax(v[0], tau))
}

fn gen_log_softmax(rng: &mut Rng) -> Option<Instance> {
    let tau = rng.range(0.05, 2.0);
    // logits within a few τ of each other; fully saturated rows have gradients below difference noise
    let z = rand_tensor(&[dim(1, 3, rng), dim(2, 6, rng)], -3.0 * tau, 3.0 * tau, rng);
    let shape = z.shape().to_vec();
    with_weights(vec![z], &shape, rng, move |g, v| g.log_softmax(v[0], tau))
}

fn gen_similarity(rng: &mut Rng) -> Option<Instance> {
    let (b, d, m) = (dim(1, 3, rng), dim(2, 5, rng), dim(1, 6, rng));
    let q = rand_tensor(&[b, d], -1.0, 1.0, rng);
    let pos = unit_rows(b, d, rng);
    let bank = unit_rows(m, d, rng);
    with_weights(vec![q], &[b, m + 1], rng, move |g, v| g.similarity(v[0], &pos, &bank))
}

fn gen_nll(rng: &mut Rng) -> Option<Instance> {
    let lp = rand_tensor(&[dim(1, 4, rng), dim(1, 5, rng)], -3.0, 0.0, rng);
    Some(Instance {
        inputs: vec![lp],
        build: Box::new(|g, v| g.nll_first_mean(v[0])),
    })
}

fn gen_kl(rng: &mut Rng) -> Option<Instance> {
    let (b, n) = (dim(1, 4, rng), dim(2, 6, rng));
    let logq = ops::log_softmax_with_temperature(&rand_tensor(&[b, n], -2.0, 2.0, rng), 1.0).ok()?;
    let targets = distribution_rows(b, n, rng);
    Some(Instance {
        inputs: vec![logq],
        build: Box::new(move |g, v| g.kl_rows_mean(v[0], &targets)),
    })
}

fn gen_add(rng: &mut Rng) -> Option<Instance> {
    let shape = [dim(1, 3, rng), dim(1, 4, rng)];
    let inputs = vec![rand_tensor(&shape, -1.0, 1.0, rng), rand_tensor(&shape, -1.0, 1.0, rng)];
    with_weights(inputs, &shape, rng, |g, v| g.add(v[0], v[1]))
}

fn gen_scale(rng: &mut Rng) -> Option<Instance> {
    let shape = [dim(1, 3, rng), dim(1, 4, rng)];
    let c = rng.range(-3.0, 3.0);
    with_weights(vec![rand_tensor(&shape, -1.0, 1.0, rng)], &shape, rng, move |g, v| Ok(g.scale(v[0], c)))
}

fn gen_sum(rng: &mut Rng) -> Option<Instance> {
    let x = rand_tensor(&[dim(1, 3, rng), dim(1, 4, rng)], -1.0, 1.0, rng);
    Some(Instance {
        inputs: vec![x],
        build: Box::new(|g, v| Ok(g.sum(v[0]))),
    })
}

fn gen_sum_squares(rng: &mut Rng) -> Option<Instance> {
    let x = rand_tensor(&[dim(1, 3, rng), dim(1, 4, rng)], -1.0, 1.0, rng);
    Some(Instance {
        inputs: vec![x],
        build: Box::new(|g, v| Ok(g.sum_squares(v[0]))),
    })
}

fn gen_weighted_sum(rng: &mut Rng) -> Option<Instance> {
    let shape = [dim(1, 3, rng), dim(1, 4, rng)];
    with_weights(vec![rand_tensor(&shape, -1.0, 1.0, rng)], &shape, rng, |_, v| Ok(v[0]))
}

/// Random objective inputs: raw query rows `u` (normalized inside the loss),
/// student positives and queue, and teacher soft targets.
struct ObjectiveCase {
    u: Tensor,
    k_s: Tensor,
    bank_s: Tensor,
    p_t: Tensor,
    tau: f64,
    tau_d: f64,
    lambda: f64,
}

fn objective_case(rng: &mut Rng) -> ObjectiveCase {
    let (b, d, m) = (dim(1, 4, rng), dim(2, 6, rng), dim(1, 12, rng));
    let tau = if rng.bernoulli(0.5) { 0.07 } else { rng.range(0.05, 1.0) };
    let tau_d = if rng.bernoulli(0.5) { tau } else { rng.range(0.05, 1.0) };
    let q_t = unit_rows(b, d, rng);
    let k_t = unit_rows(b, d, rng);
    let bank_t = unit_rows(m, d, rng);
    let s_t = ops::similarity_logits(&q_t, &k_t, &bank_t).expect("dims");
    ObjectiveCase {
        u: rand_tensor(&[b, d], -1.0, 1.0, rng),
        k_s: unit_rows(b, d, rng),
        bank_s: unit_rows(m, d, rng),
        p_t: ops::softmax_with_temperature(&s_t, tau_d).expect("tau"),
        tau,
        tau_d,
        lambda: rng.range(0.0, 10.0),
    }
}

fn objective(which: u8, rng: &mut Rng) -> Option<Instance> {
    let c = objective_case(rng);
    let u = c.u.clone();
    Some(Instance {
        inputs: vec![u],
        build: Box::new(move |g, v| {
            let q = g.l2_normalize(v[0], 1e-12)?;
            let s = g.similarity(q, &c.k_s, &c.bank_s)?;
            match which {
                0 => {
                    let lp = g.log_softmax(s, c.tau)?;
                    g.nll_first_mean(lp)
                }
                1 => {
                    let lp = g.log_softmax(s, c.tau_d)?;
                    g.kl_rows_mean(lp, &c.p_t)
                }
                _ => {
                    let lp = g.log_softmax(s, c.tau)?;
                    let con = g.nll_first_mean(lp)?;
                    let lpd = if c.tau_d == c.tau { lp } else { g.log_softmax(s, c.tau_d)? };
                    let dis = g.kl_rows_mean(lpd, &c.p_t)?;
                    let w = g.scale(dis, c.lambda);
                    g.add(con, w)
                }
            }
        }),
    })
}

/// Full encoder + combined loss; gradients checked for selected parameters.
fn encoder_case(rng: &mut Rng) -> Result<Option<f64>> {
    let cfg = EncoderConfig {
        in_channels: 1,
        input_size: [6, 6],
        conv1_channels: 2,
        conv2_channels: 3,
        d_backbone: 4,
        d_embed: 3,
        ..Default::default()
    };
    // O(1) weights: the training init shrinks gradients towards difference noise
    let mut enc = EncoderParams::init(cfg, rng)?;
    for (name, shape) in cfg.layout() {
        enc.set_value(name, rand_tensor(&shape, -1.0, 1.0, rng))?;
    }
    let b = 2;
    let x = rand_tensor(&[b, 1, 6, 6], 0.0, 1.0, rng);
    // kink screen on every relu pre-activation
    let z1 = ops::conv2d(&x, enc.value(CONV1)?, cfg.stride, cfg.pad)?;
    let z2 = ops::conv2d(&ops::relu(&z1), enc.value(CONV2)?, cfg.stride, cfg.pad)?;
    let feats = enc.features_from_batch(&x)?;
    let z3 = ops::affine(&feats, enc.value(HEAD1_W)?, enc.value(HEAD1_B)?)?;
    let near = |t: &Tensor| t.data().iter().any(|v| v.abs() < KINK_MARGIN);
    if near(&z1) || near(&z2) || near(&z3) {
        return Ok(None);
    }
    let c = {
        let mut c = objective_case(rng);
        c.k_s = unit_rows(b, cfg.d_embed, rng);
        c.bank_s = unit_rows(5, cfg.d_embed, rng);
        let q_t = unit_rows(b, cfg.d_embed, rng);
        let k_t = unit_rows(b, cfg.d_embed, rng);
        let s_t = ops::similarity_logits(&q_t, &k_t, &c.bank_s)?;
        c.p_t = ops::softmax_with_temperature(&s_t, c.tau_d)?;
        c
    };
    let loss = |e: &EncoderParams, g: &mut Graph| -> Result<NodeId> {
        let xn = g.constant(x.clone());
        let out = e.forward(g, xn, true)?;
        let s = g.similarity(out.embedding, &c.k_s, &c.bank_s)?;
        let lp = g.log_softmax(s, c.tau)?;
        let con = g.nll_first_mean(lp)?;
        let lpd = g.log_softmax(s, c.tau_d)?;
        let dis = g.kl_rows_mean(lpd, &c.p_t)?;
        let w = g.scale(dis, c.lambda);
        g.add(con, w)
    };
    let mut g = Graph::new();
    let out = loss(&enc, &mut g)?;
    let grads = g.backward(out)?;
    let mut worst: f64 = 0.0;
    let names: Vec<String> = enc.all_params().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let analytic = grads.param(&name).cloned().expect("trainable parameter");
        let base = enc.value(&name)?.clone();
        let numeric = finite_diff_gradient(
            |t| {
                let mut e = enc.clone();
                e.set_value(&name, t.clone()).expect("same shape");
                let mut g = Graph::new();
                let out = loss(&e, &mut g).expect("forward");
                g.value(out).item().expect("scalar")
            },
            &base,
            STEP,
        );
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(Some(worst))
}

type Generator = fn(&mut Rng) -> Option<Instance>;

fn op_generators() -> Vec<(&'static str, Generator)> {
    vec![
        ("affine", gen_affine),
        ("conv2d", gen_conv2d),
        ("relu", gen_relu),
        ("global_avg_pool", gen_pool),
        ("l2_normalize", gen_l2),
        ("softmax_with_temperature", gen_softmax),
        ("log_softmax_with_temperature", gen_log_softmax),
        ("similarity_logits", gen_similarity),
        ("nll_first_mean", gen_nll),
        ("kl_rows_mean", gen_kl),
        ("add", gen_add),
        ("scale", gen_scale),
        ("sum", gen_sum),
        ("sum_squares", gen_sum_squares),
        ("weighted_sum", gen_weighted_sum),
        ("contrastive_loss", |r| objective(0, r)),
        ("distillation_loss", |r| objective(1, r)),
        ("combined_loss", |r| objective(2, r)),
    ]
}

/// Runs `instances` accepted draws per entry; every entry uses its own stream.
pub fn run_gradcheck_suite(instances: usize, seed: u64) -> Result<Vec<GradcheckRow>> {
    let mut rows = Vec::new();
    for (k, (name, gen)) in op_generators().into_iter().enumerate() {
        let mut rng = Rng::stream(seed, &[k as u64]);
        let (mut done, mut redraws, mut worst) = (0, 0, 0.0f64);
        while done < instances {
            match gen(&mut rng) {
                Some(inst) => {
                    worst = worst.max(check(&inst)?);
                    done += 1;
                }
                None => redraws += 1,
            }
        }
        rows.push(GradcheckRow {
            name: name.to_string(),
            instances,
            redraws,
            max_rel_error: worst,
        });
    }
    let mut rng = Rng::stream(seed, &[u64::MAX]);
    let (mut done, mut redraws, mut worst) = (0, 0, 0.0f64);
    while done < instances {
        match encoder_case(&mut rng)? {
            Some(e) => {
                worst = worst.max(e);
                done += 1;
            }
            None => redraws += 1,
        }
    }
    rows.push(GradcheckRow {
        name: "encoder_combined_loss".into(),
        instances,
        redraws,
        max_rel_error: worst,
    });
    Ok(rows)
}

/// Plain-text table, one op per line.
pub fn format_report(rows: &[GradcheckRow]) -> String {
    let mut s = format!("{:<30} {:>9} {:>8} {:>14}  status\n", "op", "instances", "redraws", "max_rel_err");
    for r in rows {
        s.push_str(&format!(
            "{:<30} {:>9} {:>8} {:>14.3e}  {}\n",
            r.name,
            r.instances,
            r.redraws,
            r.max_rel_error,
            if r.passed() { "ok" } else { "FAIL" }
        ));
    }
    s
}
