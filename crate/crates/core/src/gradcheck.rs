//! Central finite-difference verification of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::fewshot::{self, Episode, Metric};
use crate::fusion::{fused_losses, FusedModel, FusionConfig};
use crate::nets::{self, EncoderConfig, SegNetConfig};
use crate::params::{Bound, ParamRegistry};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for the relative error; below it the comparison is
/// effectively absolute.
pub const REL_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    /// Number of scalar parameters compared.
    pub checked: usize,
    pub worst_relative_error: f64,
    /// `name[flat index]` of the worst element.
    pub worst_at: String,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.worst_relative_error < self.tolerance
    }
}

/// Deliberate corruption of analytic gradients, used to prove the checker
/// can fail.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Fault {
    #[default]
    None,
    /// Negates the analytic gradient of the first parameter.
    FlipSign,
}

/// Compares analytic gradients of `loss_fn` w.r.t. every parameter of
/// `params` against central differences with step `h`.
pub fn grad_check<F>(
    name: &str,
    params: &ParamRegistry,
    loss_fn: F,
    h: f64,
    tolerance: f64,
    fault: Fault,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = params.bind_with_grad(&mut tape, true);
    let loss = loss_fn(&mut tape, &bound)?;
    tape.backward(loss)?;
    let mut analytic = bound.grads(&tape);
    if fault == Fault::FlipSign {
        if let Some((_, g)) = analytic.get_index_mut(0) {
            g.data_mut().iter_mut().for_each(|v| *v = -*v);
        }
    }

    let eval = |p: &ParamRegistry| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = p.bind_with_grad(&mut tape, false);
        let loss = loss_fn(&mut tape, &bound)?;
        Ok(tape.value(loss).item())
    };

    let mut work = params.clone();
    let mut report = GradCheckReport {
        name: name.to_string(),
        checked: 0,
        worst_relative_error: 0.0,
        worst_at: String::new(),
        tolerance,
    };
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for pname in &names {
        let n = params.get(pname).unwrap().numel();
        for i in 0..n {
            let orig = params.get(pname).unwrap().data()[i];
            work.get_mut(pname).unwrap().data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work.get_mut(pname).unwrap().data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work.get_mut(pname).unwrap().data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.get(pname).map_or(0.0, |g| g.data()[i]);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.worst_relative_error || report.worst_at.is_empty() {
                report.worst_relative_error = err;
                report.worst_at = format!("{pname}[{i}]");
            }
        }
    }
    Ok(report)
}

/// Tolerance of the standard suite.
pub const SUITE_TOLERANCE: f64 = 1e-4;

/// Tighter tolerance for the lone linear layer, whose loss is quadratic.
pub const LINEAR_TOLERANCE: f64 = 1e-7;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-scale..scale))
}

fn registry(entries: Vec<(&str, Tensor)>) -> Result<ParamRegistry> {
    let mut p = ParamRegistry::new();
    for (name, t) in entries {
        p.insert(name, t, true)?;
    }
    Ok(p)
}

fn tiny_episode() -> Episode {
    Episode {
        k: 2,
        n: 2,
        q: 1,
        classes: vec![0, 1],
        support: vec![0, 1, 2, 3],
        query: vec![4, 5],
        support_labels: vec![0, 0, 1, 1],
        query_labels: vec![0, 1],
    }
}

/// Runs every network of the standard suite. `fault` corrupts the first
/// check only.
pub fn standard_suite(fault: Fault) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut reports = Vec::new();
    let mut fault = fault;
    let mut run = |name: &str,
                   params: ParamRegistry,
                   tol: f64,
                   f: &dyn Fn(&mut Tape, &Bound) -> Result<Var>|
     -> Result<()> {
        reports.push(grad_check(name, &params, f, FD_STEP, tol, fault)?);
        fault = Fault::None;
        Ok(())
    };

    let x = random(&mut rng, &[3, 4], 1.0);
    let p = registry(vec![("w", random(&mut rng, &[2, 4], 1.0)), ("b", random(&mut rng, &[2], 0.5))])?;
    run("linear", p, LINEAR_TOLERANCE, &|t, b| {
        let x = t.constant(x.clone());
        let y = t.linear(x, b.var("w")?, b.var("b")?)?;
        let sq = t.mul(y, y)?;
        Ok(t.sum(sq))
    })?;

    let x = random(&mut rng, &[2, 2, 4, 4], 1.0);
    let p = registry(vec![
        ("conv.w", random(&mut rng, &[3, 2, 3, 3], 0.5)),
        ("conv.b", random(&mut rng, &[3], 0.1)),
        ("fc.w", random(&mut rng, &[3, 12], 0.5)),
        ("fc.b", random(&mut rng, &[3], 0.1)),
    ])?;
    run("conv+relu+max_pool+linear+log_softmax", p, SUITE_TOLERANCE, &|t, b| {
        let x = t.constant(x.clone());
        let c = t.conv2d(x, b.var("conv.w")?, b.var("conv.b")?, 1, 1)?;
        let r = t.relu(c);
        let m = t.max_pool2d(r)?;
        let f = t.flatten(m)?;
        let z = t.linear(f, b.var("fc.w")?, b.var("fc.b")?)?;
        let lp = t.log_softmax(z)?;
        fewshot::nll_loss(t, lp, &[0, 2])
    })?;

    let x = random(&mut rng, &[1, 2, 3, 3], 1.0);
    let target = Tensor::from_fn([1, 1, 6, 6], |i| f64::from(u8::from(i % 3 == 0)));
    let p = registry(vec![
        ("conv.w", random(&mut rng, &[1, 4, 3, 3], 0.5)),
        ("conv.b", random(&mut rng, &[1], 0.1)),
        ("skip", random(&mut rng, &[1, 2, 6, 6], 1.0)),
    ])?;
    run("upsample+concat+conv+sigmoid+bce", p, SUITE_TOLERANCE, &|t, b| {
        let x = t.constant(x.clone());
        let u = t.upsample_nearest(x)?;
        let j = t.concat_channels(u, b.var("skip")?)?;
        let c = t.conv2d(j, b.var("conv.w")?, b.var("conv.b")?, 1, 1)?;
        let s = t.sigmoid(c);
        let y = t.constant(target.clone());
        t.bce_loss(s, y)
    })?;

    let p = registry(vec![("x", random(&mut rng, &[1, 2, 4, 4], 1.0))])?;
    run("avg_pool+exp+mean", p, SUITE_TOLERANCE, &|t, b| {
        let a = t.avg_pool2d(b.var("x")?)?;
        let e = t.exp(a);
        Ok(t.mean(e))
    })?;

    let p = registry(vec![
        ("image", random(&mut rng, &[2, 3, 4, 4], 1.0)),
        ("logits", random(&mut rng, &[2, 1, 4, 4], 2.0)),
    ])?;
    run("mask_channels", p, SUITE_TOLERANCE, &|t, b| {
        let m = t.sigmoid(b.var("logits")?);
        let g = t.mask_channels(b.var("image")?, m)?;
        let sq = t.mul(g, g)?;
        Ok(t.mean(sq))
    })?;

    for metric in [Metric::Euclidean, Metric::Cosine] {
        let p = registry(vec![("emb", random(&mut rng, &[6, 5], 1.0))])?;
        let ep = tiny_episode();
        run(&format!("prototypes+{metric}+log_softmax+nll"), p, SUITE_TOLERANCE, &move |t, b| {
            let e = b.var("emb")?;
            let s = t.select_rows(e, &ep.support)?;
            let q = t.select_rows(e, &ep.query)?;
            let protos = t.class_mean(s, &ep.support_labels, ep.k)?;
            let lp = fewshot::log_probabilities(t, q, protos, metric)?;
            fewshot::nll_loss(t, lp, &ep.query_labels)
        })?;
    }

    let config = FusionConfig {
        encoder: EncoderConfig {
            side: 8,
            widths: vec![2, 3],
            embedding_dim: 3,
        },
        segnet: SegNetConfig {
            side: 8,
            widths: vec![2],
            skip: true,
        },
        seed: 11,
        ..FusionConfig::default()
    };
    let model = FusedModel::init(&config)?;
    let images = Tensor::from_fn([6, 3, 8, 8], |_| rng.random_range(0.0..1.0));
    let masks = Tensor::from_fn([6, 1, 8, 8], |i| f64::from(u8::from((i / 8) % 8 >= 3)));

    let seg_cfg = config.segnet.clone();
    let (xi, yi) = (images.clone(), masks.clone());
    run("segnet", model.segnet.clone(), SUITE_TOLERANCE, &move |t, b| {
        let x = t.constant(xi.clone());
        let y = t.constant(yi.clone());
        let m = nets::segnet_forward(t, b, &seg_cfg, x)?;
        t.bce_loss(m, y)
    })?;

    let all = model.to_registry()?;
    let ep = tiny_episode();
    let (seg_cfg, enc_cfg) = (config.segnet.clone(), config.encoder.clone());
    run("fused segnet+mask+encoder+prototypes", all, SUITE_TOLERANCE, &move |t, b| {
        let x = t.constant(images.clone());
        let y = t.constant(masks.clone());
        let m = nets::segnet_forward(t, b, &seg_cfg, x)?;
        let v = fused_losses(t, b, &enc_cfg, x, m, y, &ep, Metric::Cosine, 2.0)?;
        Ok(v.l_total)
    })?;

    let x = random(&mut rng, &[3, 4], 1.0);
    let p = registry(vec![("w", random(&mut rng, &[2, 4], 0.1)), ("b", Tensor::full([2], -10.0))])?;
    run("dead relu", p, SUITE_TOLERANCE, &|t, b| {
        let x = t.constant(x.clone());
        let y = t.linear(x, b.var("w")?, b.var("b")?)?;
        let r = t.relu(y);
        Ok(t.sum(r))
    })?;

    Ok(reports)
}
