//! The full gradient-check suite: every differentiable primitive plus the
//! composite blocks, each checked against central finite differences on
//! seeded random probes.
//!
//! Probes for kinked ops (relu family, absolute differences) are nudged
//! away from the kink so the finite-difference window never straddles it.

use crate::gan::{perceptual_loss, PerceptualExtractor};
use crate::generator::{Generator, GeneratorConfig};
use crate::itm::ImplicitTransformModule;
use crate::nn::Mode;
use crate::pconvmlp::PConvMlpBlock;
use crate::tensor::{gradcheck, gradcheck_multi, Rng, Tape, Tensor};
use crate::Result;

pub const EPS: f32 = 1e-3;
/// Default tolerance for primitives and blocks.
pub const TOL: f32 = 1e-2;
/// End-to-end generator probe tolerance.
pub const TOL_GENERATOR: f32 = 2e-2;

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub max_rel_err: f32,
    pub tolerance: f32,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

fn probe(shape: &[usize], seed: u64, tag: &str) -> Tensor {
    Tensor::randn(shape, 0.0, 1.0, &mut Rng::new(seed, tag))
}

/// Random probe pushed at least 0.1 away from zero, elementwise.
fn probe_off_zero(shape: &[usize], seed: u64, tag: &str) -> Tensor {
    let t = probe(shape, seed, tag);
    let data = t
        .data()
        .iter()
        .map(|&v| if v >= 0.0 { v + 0.1 } else { v - 0.1 })
        .collect();
    Tensor::from_vec(data, shape).unwrap()
}

/// Strictly positive probe (for log).
fn probe_positive(shape: &[usize], seed: u64, tag: &str) -> Tensor {
    let t = probe(shape, seed, tag);
    let data = t.data().iter().map(|&v| v.abs() + 0.5).collect();
    Tensor::from_vec(data, shape).unwrap()
}

/// Runs the whole suite over the given seeds, reporting the max relative
/// error per item across seeds.
pub fn run_gradcheck_suite(seeds: &[u64]) -> Result<Vec<SuiteEntry>> {
    let mut entries: Vec<SuiteEntry> = Vec::new();
    let mut push = |name: &'static str, err: f32, tol: f32| {
        entries.push(SuiteEntry { name, max_rel_err: err, tolerance: tol });
    };

    // Exact linear case: reduced in f64, so effectively exact.
    let mut worst = 0.0f32;
    for &s in seeds {
        let x = probe(&[3, 4], s, "gc.sum");
        worst = worst.max(gradcheck(|t, x| t.sum(x), &x, EPS)?);
    }
    push("sum", worst, 1e-6);

    let mut worst = 0.0f32;
    for &s in seeds {
        let x = probe(&[2, 3, 4], s, "gc.mean");
        worst = worst.max(gradcheck(|t, x| t.mean(x), &x, EPS)?);
    }
    push("mean", worst, TOL);

    macro_rules! unary {
        ($name:literal, $probe:ident, $shape:expr, $tol:expr, $body:expr) => {{
            let mut worst = 0.0f32;
            for &s in seeds {
                let x = $probe(&$shape, s, concat!("gc.", $name));
                let f: fn(&mut Tape, &Tensor) -> Result<Tensor> = $body;
                let err = gradcheck(
                    |t: &mut Tape, x: &Tensor| {
                        let y = f(t, x)?;
                        t.mean(&y)
                    },
                    &x,
                    EPS,
                )?;
                worst = worst.max(err);
            }
            push($name, worst, $tol);
        }};
    }

    unary!("relu", probe_off_zero, [2, 8], TOL, |t, x| t.relu(x));
    unary!("leaky_relu", probe_off_zero, [2, 8], TOL, |t, x| t.leaky_relu(x, 0.2));
    unary!("gelu", probe, [2, 8], TOL, |t, x| t.gelu(x));
    unary!("tanh", probe, [2, 8], TOL, |t, x| t.tanh(x));
    unary!("sigmoid", probe, [2, 8], TOL, |t, x| t.sigmoid(x));
    unary!("log", probe_positive, [2, 8], TOL, |t, x| t.log(x));
    unary!("softmax", probe, [2, 5], TOL, |t, x| t.softmax(x, 1));
    unary!("reshape", probe, [2, 6], TOL, |t, x| t.reshape(x, &[3, 4]));
    unary!("permute", probe, [2, 3, 4], TOL, |t, x| t.permute(x, &[2, 0, 1]));
    unary!("transpose", probe, [2, 3, 4], TOL, |t, x| t.transpose_last2(x));
    unary!("nearest_upsample2", probe, [1, 2, 3, 3], TOL, |t, x| t.nearest_upsample2(x));
    unary!("stride_channels", probe, [1, 4, 3, 3], TOL, |t, x| t.stride_channels(x, 1));
    unary!("scale", probe, [2, 5], TOL, |t, x| t.scale(x, -1.7));
    unary!("tv_loss", probe, [1, 3, 5, 5], TOL, |t, x| t.tv_loss(x));
    unary!("bce_with_logits", probe, [2, 6], TOL, |t, x| t.bce_with_logits(x, 1.0));

    macro_rules! binary {
        ($name:literal, $sa:expr, $sb:expr, $body:expr) => {{
            let mut worst = 0.0f32;
            for &s in seeds {
                let a = probe(&$sa, s, concat!("gc.", $name, ".a"));
                let b = probe(&$sb, s, concat!("gc.", $name, ".b"));
                let f: fn(&mut Tape, &Tensor, &Tensor) -> Result<Tensor> = $body;
                let errs = gradcheck_multi(
                    |t: &mut Tape, xs: &[Tensor]| {
                        let y = f(t, &xs[0], &xs[1])?;
                        t.mean(&y)
                    },
                    &[a, b],
                    EPS,
                )?;
                worst = worst.max(errs[0]).max(errs[1]);
            }
            push($name, worst, TOL);
        }};
    }

    binary!("add", [2, 5], [2, 5], |t, a, b| t.add(a, b));
    binary!("sub", [2, 5], [2, 5], |t, a, b| t.sub(a, b));
    binary!("mul", [2, 5], [2, 5], |t, a, b| t.mul(a, b));
    binary!("add_rowvec", [3, 4], [4], |t, a, b| t.add_rowvec(a, b));
    binary!("matmul", [2, 4, 3], [2, 3, 5], |t, a, b| t.matmul(a, b));
    binary!("concat", [1, 2, 3, 3], [1, 2, 3, 3], |t, a, b| t.concat(&[a, b], 1));
    binary!("interleave_channels", [1, 2, 3, 3], [1, 2, 3, 3], |t, a, b| t.interleave_channels(a, b));
    binary!("mse_loss", [2, 6], [2, 6], |t, a, b| t.mse_loss(a, b));

    // L1 needs separated operands so no difference sits inside the window.
    let mut worst = 0.0f32;
    for &s in seeds {
        let a = probe(&[2, 6], s, "gc.l1.a");
        let shifted: Vec<f32> = a.data().iter().map(|v| v + 0.5).collect();
        let b = Tensor::from_vec(shifted, &[2, 6]).unwrap();
        let errs = gradcheck_multi(|t, xs| t.l1_loss(&xs[0], &xs[1]), &[a, b], EPS)?;
        worst = worst.max(errs[0]).max(errs[1]);
    }
    push("l1_loss", worst, TOL);

    // conv2d w.r.t. input, weight and bias.
    let mut worst = 0.0f32;
    for &s in seeds {
        let x = probe(&[1, 2, 6, 6], s, "gc.conv.x");
        let w = Tensor::randn(&[3, 2, 3, 3], 0.0, 0.5, &mut Rng::new(s, "gc.conv.w"));
        let b = probe(&[3], s, "gc.conv.b");
        let errs = gradcheck_multi(
            |t, xs| {
                let y = t.conv2d(&xs[0], &xs[1], &xs[2], 2, 1)?;
                t.mean(&y)
            },
            &[x, w, b],
            EPS,
        )?;
        worst = worst.max(errs.iter().fold(0.0f32, |m, &e| m.max(e)));
    }
    push("conv2d", worst, TOL);

    // Batch norm, train and eval modes.
    let mut worst = 0.0f32;
    for &s in seeds {
        let x = probe(&[4, 2, 3, 3], s, "gc.bn.x");
        let gamma = probe_off_zero(&[2], s, "gc.bn.gamma");
        let beta = probe(&[2], s, "gc.bn.beta");
        let errs = gradcheck_multi(
            |t, xs| {
                let (y, _, _) = t.batch_norm_train(&xs[0], &xs[1], &xs[2], 1e-5)?;
                let w = probe(&[4, 2, 3, 3], 99, "gc.bn.mix");
                let m = t.mul(&y, &w)?;
                t.mean(&m)
            },
            &[x.clone(), gamma.clone(), beta.clone()],
            EPS,
        )?;
        worst = worst.max(errs.iter().fold(0.0f32, |m, &e| m.max(e)));
        let errs = gradcheck_multi(
            |t, xs| {
                let y = t.batch_norm_eval(&xs[0], &xs[1], &xs[2], &[0.1, -0.2], &[0.9, 1.1], 1e-5)?;
                t.mean(&y)
            },
            &[x, gamma, beta],
            EPS,
        )?;
        worst = worst.max(errs.iter().fold(0.0f32, |m, &e| m.max(e)));
    }
    push("batch_norm", worst, TOL);

    // Composite: whole Conv-MLP block w.r.t. its input (BN in eval mode).
    let mut worst = 0.0f32;
    for &s in seeds {
        let blk = PConvMlpBlock::new(4, 8, 8, 4, 16, &mut Rng::new(s, "gc.pconvmlp.w"))?;
        let x = probe(&[1, 4, 8, 8], s, "gc.pconvmlp.x");
        let err = gradcheck(
            |t, x| {
                let y = blk.forward(t, x, Mode::Eval)?;
                t.mean(&y)
            },
            &x,
            EPS,
        )?;
        worst = worst.max(err);
    }
    push("pconvmlp_block", worst, TOL);

    // Composite: attention module w.r.t. all three inputs and both
    // projection weights.
    let mut worst = 0.0f32;
    for &s in seeds {
        let m = ImplicitTransformModule::new(4, false, &mut Rng::new(s, "gc.itm.w"))?;
        let fq = probe(&[1, 4, 3, 3], s, "gc.itm.q");
        let fk = probe(&[1, 4, 3, 3], s, "gc.itm.k");
        let fv = probe(&[1, 4, 3, 3], s, "gc.itm.v");
        let qw = m.q_proj.weight.detach();
        let kw = m.k_proj.weight.detach();
        let errs = gradcheck_multi(
            |t, xs| {
                let mut m2 = m.clone();
                m2.q_proj.weight = xs[3].clone();
                m2.k_proj.weight = xs[4].clone();
                let y = m2.forward(t, &xs[0], &xs[1], &xs[2])?;
                t.mean(&y)
            },
            &[fq, fk, fv, qw, kw],
            EPS,
        )?;
        worst = worst.max(errs.iter().fold(0.0f32, |m, &e| m.max(e)));
    }
    push("itm", worst, TOL);

    // Fixed sub-networks on 6×6 probes, BN in eval mode.
    let mut worst = 0.0f32;
    for &s in seeds {
        let stem = crate::nn::EncoderStem::new(4, &mut Rng::new(s, "gc.stem.w"));
        let x = probe(&[1, 3, 6, 6], s, "gc.stem.x");
        let err = gradcheck(
            |t, x| {
                let y = stem.forward(t, x, Mode::Eval)?;
                t.mean(&y)
            },
            &x,
            EPS,
        )?;
        worst = worst.max(err);
    }
    push("encoder_stem", worst, TOL);

    let mut worst = 0.0f32;
    for &s in seeds {
        let blk = crate::nn::UpsampleBlock::new(4, 2, &mut Rng::new(s, "gc.up.w"));
        let x = probe(&[1, 4, 6, 6], s, "gc.up.x");
        let err = gradcheck(
            |t, x| {
                let y = blk.forward(t, x, Mode::Eval)?;
                t.mean(&y)
            },
            &x,
            EPS,
        )?;
        worst = worst.max(err);
    }
    push("upsample_block", worst, TOL);

    let mut worst = 0.0f32;
    for &s in seeds {
        let head = crate::nn::DecoderHead::new(4, &mut Rng::new(s, "gc.head.w"));
        let x = probe(&[1, 4, 6, 6], s, "gc.head.x");
        let err = gradcheck(
            |t, x| {
                let y = head.forward(t, x, Mode::Eval)?;
                t.mean(&y)
            },
            &x,
            EPS,
        )?;
        worst = worst.max(err);
    }
    push("decoder_head", worst, TOL);

    // Composite: perceptual loss w.r.t. its first image.
    let mut worst = 0.0f32;
    let ext = PerceptualExtractor::new();
    for &s in seeds {
        let a = probe(&[1, 3, 8, 8], s, "gc.per.a");
        let b = probe(&[1, 3, 8, 8], s, "gc.per.b");
        let err = gradcheck(
            |t, a| perceptual_loss(t, a, &b.detach(), &ext),
            &a,
            EPS,
        )?;
        worst = worst.max(err);
    }
    push("perceptual_loss", worst, TOL);

    // Composite: mean of the fused generator output w.r.t. a 16-element
    // parameter, at desk scale with BN in eval mode.
    let mut worst = 0.0f32;
    for &s in seeds {
        let gen = Generator::new(GeneratorConfig { seed: s, ..GeneratorConfig::desk() })?;
        let i_a = Tensor::randn(&[1, 3, 64, 64], 0.0, 0.5, &mut Rng::new(s, "gc.gen.ia"));
        let s_g = Tensor::randn(&[1, 3, 64, 64], 0.0, 0.5, &mut Rng::new(s, "gc.gen.sg"));
        let target = pick_param(&gen, 16)
            .ok_or_else(|| crate::Error::Config("no 16-element parameter found".to_string()))?;
        let x0 = get_param(&gen, &target).unwrap().detach();
        let err = gradcheck(
            |t, x| {
                let mut g = gen.clone();
                set_param(&mut g, &target, x);
                let out = g.forward(t, &i_a, &s_g, Mode::Eval)?;
                t.mean(&out.fused)
            },
            &x0,
            EPS,
        )?;
        worst = worst.max(err);
    }
    push("generator_e2e", worst, TOL_GENERATOR);

    Ok(entries)
}

/// First generator parameter with exactly `numel` elements.
pub fn pick_param(gen: &Generator, numel: usize) -> Option<String> {
    let mut found = None;
    gen.visit_params(&mut |name, p| {
        if found.is_none() && p.numel() == numel {
            found = Some(name.to_string());
        }
    });
    found
}

fn get_param(gen: &Generator, name: &str) -> Option<Tensor> {
    let mut found = None;
    gen.visit_params(&mut |n, p| {
        if n == name {
            found = Some(p.clone());
        }
    });
    found
}

fn set_param(gen: &mut Generator, name: &str, value: &Tensor) {
    gen.visit_params_mut(&mut |n, p| {
        if n == name {
            *p = value.to_param();
        }
    });
}

/// One `name  max_err  tol  PASS/FAIL` line per entry.
pub fn render_suite(entries: &[SuiteEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        out.push_str(&format!(
            "{:<22} max_rel_err {:>12.3e}  tol {:>8.0e}  {}\n",
            e.name,
            e.max_rel_err,
            e.tolerance,
            if e.passed() { "PASS" } else { "FAIL" }
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_one_seed() {
        let entries = run_gradcheck_suite(&[17]).unwrap();
        assert!(entries.len() >= 25);
        for e in &entries {
            assert!(e.passed(), "{} failed: {} > {}", e.name, e.max_rel_err, e.tolerance);
        }
    }
}
