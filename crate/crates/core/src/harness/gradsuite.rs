//! Finite-difference checks of every graph primitive and loss on random
//! instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::metrics::{combined_loss, cross_entropy_loss, dice_loss, LabelVolume};
use crate::seed::derive_seed;
use crate::tensor::{
    grad_check, random_projection, GradCheckOptions, GradCheckReport, Graph, Tensor, Var,
};

pub const PRIMITIVE_TOL: f64 = 1e-4;
pub const LOSS_TOL: f64 = 1e-3;
pub const DEFAULT_INSTANCES: usize = 20;

type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

struct Case {
    inputs: Vec<Tensor<f64>>,
    build: Build,
    kinks: Vec<f64>,
}

fn case(
    inputs: Vec<Tensor<f64>>,
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static,
) -> Case {
    Case {
        inputs,
        build: Box::new(build),
        kinks: Vec::new(),
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn rand_shape(rng: &mut ChaCha8Rng, rank: usize, max: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.gen_range(1..=max)).collect()
}

fn random_input(rng: &mut ChaCha8Rng, rank: usize, max: usize) -> Tensor<f64> {
    let s = rand_shape(rng, rank, max);
    rand_tensor(rng, &s)
}

/// Magnitudes in `[lo, hi]` with random sign.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(lo..hi);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn loss_case(
    rng: &mut ChaCha8Rng,
    which: fn(&mut Graph<f64>, Var, &LabelVolume) -> Result<Var>,
) -> Case {
    let classes = rng.gen_range(2..=4);
    let ext = [rng.gen_range(1..=3), rng.gen_range(1..=3), 2];
    let labels = (0..ext.iter().product())
        .map(|_| rng.gen_range(0..classes) as u8)
        .collect();
    let target = LabelVolume::new(ext, [1.0; 3], labels).expect("valid labels");
    let logits = rand_tensor(rng, &[classes, ext[0], ext[1], ext[2]]);
    case(vec![logits], move |g, v| {
        let p = g.softmax(v[0], 0)?;
        which(g, p, &target)
    })
}

type Maker = fn(&mut ChaCha8Rng) -> Case;

/// `(name, relative tolerance, instance generator)` for every check.
fn cases() -> Vec<(&'static str, f64, Maker)> {
    vec![
        ("conv3d", PRIMITIVE_TOL, |rng| {
            let cin = rng.gen_range(1..=2);
            let cout = rng.gen_range(1..=3);
            let k = if rng.gen_bool(0.7) { 3 } else { 1 };
            let stride = rng.gen_range(1..=2);
            let pad = rng.gen_range(0..=k / 2);
            let e = rng.gen_range(3..=5);
            let x = rand_tensor(rng, &[cin, e, e, e]);
            let w = rand_tensor(rng, &[cout, cin, k, k, k]);
            let b = rand_tensor(rng, &[cout]);
            case(vec![x, w, b], move |g, v| {
                g.conv3d(v[0], v[1], v[2], stride, pad)
            })
        }),
        ("conv_transpose3d", PRIMITIVE_TOL, |rng| {
            let cin = rng.gen_range(1..=2);
            let cout = rng.gen_range(1..=2);
            let k = if rng.gen_bool(0.7) { 2 } else { 4 };
            let s: Vec<usize> = rand_shape(rng, 3, 3);
            let x = rand_tensor(rng, &[cin, s[0], s[1], s[2]]);
            let w = rand_tensor(rng, &[cin, cout, k, k, k]);
            let b = rand_tensor(rng, &[cout]);
            case(vec![x, w, b], |g, v| {
                g.conv_transpose3d(v[0], v[1], v[2], 2)
            })
        }),
        ("linear", PRIMITIVE_TOL, |rng| {
            let s = rand_shape(rng, 3, 4);
            let x = rand_tensor(rng, &[s[0], s[1]]);
            let w = rand_tensor(rng, &[s[2], s[1]]);
            let b = rand_tensor(rng, &[s[2]]);
            case(vec![x, w, b], |g, v| g.linear(v[0], v[1], v[2]))
        }),
        ("matmul", PRIMITIVE_TOL, |rng| {
            let [batch, m, k, n] = [0; 4].map(|_| rng.gen_range(1..=3));
            let (ta, tb) = (rng.gen_bool(0.5), rng.gen_bool(0.5));
            let a = rand_tensor(rng, &if ta { [batch, k, m] } else { [batch, m, k] });
            let b = rand_tensor(rng, &if tb { [batch, n, k] } else { [batch, k, n] });
            case(vec![a, b], move |g, v| g.matmul(v[0], v[1], ta, tb))
        }),
        ("add", PRIMITIVE_TOL, |rng| {
            let s = rand_shape(rng, 2, 4);
            case(vec![rand_tensor(rng, &s), rand_tensor(rng, &s)], |g, v| {
                g.add(v[0], v[1])
            })
        }),
        ("sub", PRIMITIVE_TOL, |rng| {
            let s = rand_shape(rng, 2, 4);
            case(vec![rand_tensor(rng, &s), rand_tensor(rng, &s)], |g, v| {
                g.sub(v[0], v[1])
            })
        }),
        ("mul", PRIMITIVE_TOL, |rng| {
            let s = rand_shape(rng, 2, 4);
            case(vec![rand_tensor(rng, &s), rand_tensor(rng, &s)], |g, v| {
                g.mul(v[0], v[1])
            })
        }),
        ("div", PRIMITIVE_TOL, |rng| {
            let s = rand_shape(rng, 2, 4);
            let den = away_from_zero(rng, &s, 0.5, 2.0);
            case(vec![rand_tensor(rng, &s), den], |g, v| g.div(v[0], v[1]))
        }),
        ("scale", PRIMITIVE_TOL, |rng| {
            let c = rng.gen_range(-2.0..2.0);
            case(vec![random_input(rng, 2, 4)], move |g, v| g.scale(v[0], c))
        }),
        ("add_scalar", PRIMITIVE_TOL, |rng| {
            let c = rng.gen_range(-2.0..2.0);
            case(vec![random_input(rng, 2, 4)], move |g, v| {
                g.add_scalar(v[0], c)
            })
        }),
        ("relu", PRIMITIVE_TOL, |rng| {
            let mut c = case(vec![random_input(rng, 2, 4)], |g, v| g.relu(v[0]));
            c.kinks = vec![0.0];
            c
        }),
        ("gelu", PRIMITIVE_TOL, |rng| {
            let s = rand_shape(rng, 2, 4);
            case(vec![away_from_zero(rng, &s, 0.0, 3.0)], |g, v| g.gelu(v[0]))
        }),
        ("softmax", PRIMITIVE_TOL, |rng| {
            let s = rand_shape(rng, 3, 3);
            let axis = rng.gen_range(0..3);
            case(vec![away_from_zero(rng, &s, 0.0, 2.0)], move |g, v| {
                g.softmax(v[0], axis)
            })
        }),
        ("layer_norm", PRIMITIVE_TOL, |rng| {
            let rows = rng.gen_range(1..=3);
            let c = rng.gen_range(2..=5);
            let x = rand_tensor(rng, &[rows, c]);
            let gamma = rand_tensor(rng, &[c]);
            let beta = rand_tensor(rng, &[c]);
            case(vec![x, gamma, beta], |g, v| {
                g.layer_norm(v[0], v[1], v[2], 1e-5)
            })
        }),
        ("instance_norm", PRIMITIVE_TOL, |rng| {
            let c = rng.gen_range(1..=3);
            let s = rand_shape(rng, 3, 3);
            let x = rand_tensor(rng, &[c, s[0], s[1], s[2] + 1]);
            let gamma = rand_tensor(rng, &[c]);
            let beta = rand_tensor(rng, &[c]);
            case(vec![x, gamma, beta], |g, v| {
                g.instance_norm(v[0], v[1], v[2], 1e-5)
            })
        }),
        ("sum_all", PRIMITIVE_TOL, |rng| {
            case(vec![random_input(rng, 3, 3)], |g, v| {
                let s = g.sum_all(v[0])?;
                g.mul(s, s)
            })
        }),
        ("mean_all", PRIMITIVE_TOL, |rng| {
            case(vec![random_input(rng, 3, 3)], |g, v| {
                let s = g.mean_all(v[0])?;
                g.mul(s, s)
            })
        }),
        ("sum_last", PRIMITIVE_TOL, |rng| {
            case(vec![random_input(rng, 3, 3)], |g, v| g.sum_last(v[0]))
        }),
        ("log_clamped", PRIMITIVE_TOL, |rng| {
            let s = rand_shape(rng, 2, 4);
            let x = Tensor::from_fn(&s, |_| rng.gen_range(0.2..2.0));
            case(vec![x], |g, v| g.log_clamped(v[0], 1e-12))
        }),
        ("concat", PRIMITIVE_TOL, |rng| {
            let axis = rng.gen_range(0..3);
            let base = rand_shape(rng, 3, 3);
            let parts = rng.gen_range(1..=3);
            let inputs = (0..parts)
                .map(|_| {
                    let mut s = base.clone();
                    s[axis] = rng.gen_range(1..=3);
                    rand_tensor(rng, &s)
                })
                .collect();
            case(inputs, move |g, v| g.concat(v, axis))
        }),
        ("reshape", PRIMITIVE_TOL, |rng| {
            let s = rand_shape(rng, 3, 3);
            let to = [s[0] * s[1], s[2]];
            case(vec![rand_tensor(rng, &s)], move |g, v| g.reshape(v[0], &to))
        }),
        ("permute", PRIMITIVE_TOL, |rng| {
            let s = rand_shape(rng, 4, 3);
            let perms = [[0, 1, 2, 3], [3, 2, 1, 0], [1, 3, 0, 2], [2, 0, 3, 1]];
            let perm = perms[rng.gen_range(0..perms.len())];
            case(vec![rand_tensor(rng, &s)], move |g, v| {
                g.permute(v[0], &perm)
            })
        }),
        ("slice", PRIMITIVE_TOL, |rng| {
            let s = rand_shape(rng, 3, 4);
            let axis = rng.gen_range(0..3);
            let start = rng.gen_range(0..s[axis]);
            let len = rng.gen_range(1..=s[axis] - start);
            case(vec![rand_tensor(rng, &s)], move |g, v| {
                g.slice(v[0], axis, start, len)
            })
        }),
        ("dice_loss", LOSS_TOL, |rng| loss_case(rng, dice_loss)),
        ("cross_entropy_loss", LOSS_TOL, |rng| {
            loss_case(rng, cross_entropy_loss)
        }),
        ("combined_loss", LOSS_TOL, |rng| {
            loss_case(rng, combined_loss)
        }),
    ]
}

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub tolerance: f64,
    pub instances: usize,
    pub report: GradCheckReport,
}

/// Checks every primitive and loss on `instances` random inputs each.
/// Tensor-valued outputs are reduced with a fixed random projection.
pub fn gradient_suite(instances: usize, seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    for (name, tol, make) in cases() {
        let mut report = GradCheckReport::default();
        for i in 0..instances {
            let s = derive_seed(seed, &format!("{name}/{i}"));
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let c = make(&mut rng);
            let opts = GradCheckOptions {
                rel_tol: tol,
                kinks: c.kinks.clone(),
                ..Default::default()
            };
            let build = &c.build;
            let r = grad_check(
                |g, v| {
                    let y = build(g, v)?;
                    if g.shape(y).is_empty() {
                        Ok(y)
                    } else {
                        random_projection(g, y, s)
                    }
                },
                &c.inputs,
                &opts,
            )?;
            report.merge(r);
        }
        out.push(SuiteEntry {
            name,
            tolerance: tol,
            instances,
            report,
        });
    }
    Ok(out)
}

pub fn suite_table(entries: &[SuiteEntry]) -> String {
    let mut out = format!(
        "{:<20} {:>9} {:>8} {:>8} {:>12}  result\n",
        "check", "tolerance", "probes", "skipped", "worst_rel"
    );
    for e in entries {
        out.push_str(&format!(
            "{:<20} {:>9.0e} {:>8} {:>8} {:>12.3e}  {}\n",
            e.name,
            e.tolerance,
            e.report.checked,
            e.report.skipped,
            e.report.worst_rel_error,
            if e.report.passed() { "pass" } else { "FAIL" }
        ));
    }
    out
}
